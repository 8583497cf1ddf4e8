//! Core domain types: processes, window words, communication and
//! synchronization actions, and their determinants.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A machine word stored in a window cell. Windows hold 8-byte integers.
pub type Word = u64;

/// Index of a process, unique within one simulated system.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Whether a communication action writes remote memory or reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Put,
    Get,
}

/// The four memory synchronization categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncKind {
    Lock,
    Unlock,
    Flush,
    Gsync,
}

/// Target of a synchronization action: a single process or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    One(ProcessId),
    All,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::One(p) => write!(f, "{p}"),
            Target::All => write!(f, "all"),
        }
    }
}

/// Identifies a lockable structure in a process's memory.
///
/// `App` ids belong to the user program. The remaining variants are
/// reserved for the resilience protocol itself: they use the same lock
/// machinery but do not participate in synchronization-counter stamping
/// or the user-visible lock count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureId {
    App(u32),
    PutLog,
    GetLog,
    CheckpointState,
}

impl StructureId {
    /// Reserved protocol structures skip SC stamping and LC accounting.
    pub fn is_protocol(self) -> bool {
        !matches!(self, StructureId::App(_))
    }
}

/// Counter values stamped on every action at issue time.
///
/// `ec` is the epoch number of the (src, trg) pair, `gc` the issuer's
/// get counter, `sc` the synchronization counter last observed by the
/// issuer, and `gnc` the issuer's gsync counter.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct CounterStamp {
    pub ec: u64,
    pub gc: u64,
    pub sc: u64,
    pub gnc: u64,
}

/// Payload of a communication action.
///
/// A get's value stays undefined until the epoch that issued it closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessData {
    Put { cell: usize, value: Word },
    Get { cell: usize, value: Option<Word> },
}

impl AccessData {
    pub fn cell(&self) -> usize {
        match *self {
            AccessData::Put { cell, .. } | AccessData::Get { cell, .. } => cell,
        }
    }
}

/// A communication action: a put or get with source, target, combine
/// flag, counter stamps, and payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: AccessKind,
    pub src: ProcessId,
    pub trg: ProcessId,
    pub combine: bool,
    pub stamp: CounterStamp,
    pub data: AccessData,
}

impl Action {
    /// The action with its data removed; sufficient to identify and
    /// order the access during recovery.
    pub fn determinant(&self) -> Determinant {
        Determinant {
            kind: self.kind,
            src: self.src,
            trg: self.trg,
            combine: self.combine,
            stamp: self.stamp,
        }
    }
}

/// An [`Action`] without its payload.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct Determinant {
    pub kind: AccessKind,
    pub src: ProcessId,
    pub trg: ProcessId,
    pub combine: bool,
    pub stamp: CounterStamp,
}

/// A synchronization action with the counters current at issue time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyncAction {
    pub kind: SyncKind,
    pub src: ProcessId,
    pub trg: Target,
    pub stamp: CounterStamp,
    /// Locked or flushed structure; `None` means the whole window.
    pub structure: Option<StructureId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_drops_only_data() {
        let a = Action {
            kind: AccessKind::Put,
            src: ProcessId(0),
            trg: ProcessId(1),
            combine: true,
            stamp: CounterStamp {
                ec: 3,
                gc: 1,
                sc: 0,
                gnc: 2,
            },
            data: AccessData::Put { cell: 7, value: 42 },
        };
        let d = a.determinant();
        assert_eq!(d.kind, a.kind);
        assert_eq!(d.src, a.src);
        assert_eq!(d.trg, a.trg);
        assert_eq!(d.combine, a.combine);
        assert_eq!(d.stamp, a.stamp);

        let mut b = a.clone();
        b.data = AccessData::Put { cell: 7, value: 43 };
        assert_ne!(a, b);
        assert_eq!(a.determinant(), b.determinant());
    }

    #[test]
    fn protocol_structures_are_reserved() {
        assert!(!StructureId::App(3).is_protocol());
        assert!(StructureId::PutLog.is_protocol());
        assert!(StructureId::GetLog.is_protocol());
        assert!(StructureId::CheckpointState.is_protocol());
    }
}
