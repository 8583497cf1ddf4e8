//! In-memory checkpointing: coordinated schemes for gsync- and
//! lock-synchronized codes, demand (uncoordinated) checkpoints under
//! the epoch condition, XOR checksum groups, and the Daly interval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, MachineError, RecoveryError};
use crate::machine::action::{ProcessId, StructureId, SyncKind, Target, Word};
use crate::machine::order::{EventId, EventKind, OrderGraph};
use crate::machine::{CounterState, Machine, SyncOutcome};

/// Counter snapshot attached to a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub owner: ProcessId,
    pub seq: u64,
    pub counters: CounterState,
    /// Opaque program position supplied by the driver; a replacement
    /// process resumes from here.
    pub resume_tag: u64,
}

/// A full window image plus the counters current at capture time.
/// Captured only at points where the owner holds no open epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub payload: Vec<Word>,
}

impl Checkpoint {
    /// Flat little-endian serialization of the payload words.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() * 8);
        for w in &self.payload {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn payload_from_bytes(bytes: &[u8]) -> Option<Vec<Word>> {
        if !bytes.len().is_multiple_of(8) {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| Word::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Confirmation returned after a demand checkpoint; the requester trims
/// its logs with these bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkptConfirmation {
    /// E(requester -> victim) at capture time.
    pub epoch: u64,
    pub gnc: u64,
    pub gc: u64,
    pub sc: u64,
}

/// A group of computing processes plus the checksum process holding the
/// cell-wise XOR parity of their latest checkpoint payloads (m = 1).
#[derive(Debug, Clone)]
pub struct CheckpointGroup {
    pub members: Vec<ProcessId>,
    pub checksum_holder: ProcessId,
    parity: Vec<Word>,
    member_meta: BTreeMap<u32, CheckpointMeta>,
}

impl CheckpointGroup {
    pub fn new(members: Vec<ProcessId>, checksum_holder: ProcessId, window: usize) -> Self {
        Self {
            members,
            checksum_holder,
            parity: vec![0; window],
            member_meta: BTreeMap::new(),
        }
    }

    pub fn parity(&self) -> &[Word] {
        &self.parity
    }

    pub fn member_meta(&self, p: ProcessId) -> Option<&CheckpointMeta> {
        self.member_meta.get(&p.0)
    }

    /// Folds a member's new checkpoint into the parity:
    /// parity := parity XOR old XOR new. A member that never
    /// checkpointed before contributes an all-zero old payload.
    pub fn xor_update(&mut self, member: ProcessId, old: &[Word], new: &[Word]) {
        debug_assert!(self.members.contains(&member));
        debug_assert_eq!(old.len(), self.parity.len());
        debug_assert_eq!(new.len(), self.parity.len());
        for (i, p) in self.parity.iter_mut().enumerate() {
            *p ^= old[i] ^ new[i];
        }
    }

    pub(crate) fn set_meta(&mut self, meta: CheckpointMeta) {
        self.member_meta.insert(meta.owner.0, meta);
    }

    /// Reconstructs the lost member's latest payload from the parity
    /// and the surviving members' latest payloads. Exactly one member
    /// may be missing; a second loss in the group is catastrophic.
    pub fn xor_recover(
        &self,
        lost: ProcessId,
        survivors: &[(ProcessId, Vec<Word>)],
    ) -> Result<Vec<Word>, RecoveryError> {
        if !self.members.contains(&lost) {
            return Err(RecoveryError::Catastrophic(format!(
                "{lost} is not a member of this group"
            )));
        }
        let mut have: Vec<ProcessId> = survivors.iter().map(|(p, _)| *p).collect();
        have.sort();
        let mut need: Vec<ProcessId> = self
            .members
            .iter()
            .copied()
            .filter(|&m| m != lost)
            .collect();
        need.sort();
        if have != need {
            return Err(RecoveryError::Catastrophic(format!(
                "group of {lost} lost more than one member; XOR (m = 1) cannot reconstruct"
            )));
        }
        let mut out = self.parity.clone();
        for (_, payload) in survivors {
            for (o, w) in out.iter_mut().zip(payload.iter()) {
                *o ^= w;
            }
        }
        Ok(out)
    }
}

/// Machine-wide checkpoint state: the groups and the latest coordinated
/// set. The coordinated set is the protocol's safety net and is kept
/// durable by the store.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    pub(crate) groups: Vec<CheckpointGroup>,
    group_of: BTreeMap<u32, usize>,
    pub(crate) coordinated: Option<BTreeMap<u32, Checkpoint>>,
    /// Capture events of every coordinated set ever taken.
    pub(crate) cc_capture_history: Vec<Vec<EventId>>,
    pub(crate) last_cc_end_event: u64,
    pub(crate) last_cc_cost_events: u64,
    pub(crate) cc_count: u64,
}

impl CheckpointStore {
    pub fn groups(&self) -> &[CheckpointGroup] {
        &self.groups
    }

    pub fn coordinated_set(&self) -> Option<&BTreeMap<u32, Checkpoint>> {
        self.coordinated.as_ref()
    }

    pub fn coordinated_count(&self) -> u64 {
        self.cc_count
    }

    pub fn last_cc_end_event(&self) -> u64 {
        self.last_cc_end_event
    }

    /// Capture events of every coordinated set, oldest first.
    pub fn coordinated_capture_history(&self) -> &[Vec<EventId>] {
        &self.cc_capture_history
    }
}

/// Inputs to the Daly interval: checkpoint cost and mean time between
/// failures, both in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DalyParams {
    pub delta: f64,
    pub mtbf: f64,
}

/// Near-optimal spacing between coordinated checkpoints:
/// sqrt(2 d M) * (1 + 1/3 sqrt(d/(2M)) + (1/9)(d/(2M))) - d for
/// d < 2M, and M otherwise.
pub fn daly_interval(p: &DalyParams) -> Result<f64, CheckpointError> {
    if !(p.delta > 0.0) || !(p.mtbf > 0.0) {
        return Err(CheckpointError::BadDalyParams {
            delta: p.delta,
            mtbf: p.mtbf,
        });
    }
    if p.delta >= 2.0 * p.mtbf {
        return Ok(p.mtbf);
    }
    let ratio = p.delta / (2.0 * p.mtbf);
    Ok((2.0 * p.delta * p.mtbf).sqrt() * (1.0 + ratio.sqrt() / 3.0 + ratio / 9.0) - p.delta)
}

/// Result of checking Definition 1 over a coordinated set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyResult {
    Consistent,
    /// Two captures are cohb-ordered: first precedes second.
    Violation { first: EventId, second: EventId },
}

/// A set is RMA-consistent iff no pair of its checkpoints is
/// cohb-ordered.
pub fn rma_consistency_check(graph: &OrderGraph, captures: &[EventId]) -> ConsistencyResult {
    for (i, &a) in captures.iter().enumerate() {
        for &b in captures.iter().skip(i + 1) {
            if graph.cohb_related(a, b) {
                return ConsistencyResult::Violation { first: a, second: b };
            }
            if graph.cohb_related(b, a) {
                return ConsistencyResult::Violation { first: b, second: a };
            }
        }
    }
    ConsistencyResult::Consistent
}

/// Outcome of a scheme that may have to wait for locks to drain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocksCheckpointOutcome {
    Done(Vec<EventId>),
    /// Some process still holds a lock; retry once LC returns to zero.
    Deferred { holding: Vec<ProcessId> },
}

/// Outcome of a demand-checkpoint request.
#[derive(Debug, Clone, PartialEq)]
pub enum DemandOutcome {
    Done(CkptConfirmation),
    /// The victim cannot capture right now (lock held, collective wait,
    /// or its structures are locked); retry later.
    Deferred { reason: String },
}

impl Machine {
    /// Splits processes into checkpoint groups. Each entry lists the
    /// computing members and the checksum process holding their parity.
    pub fn configure_groups(
        &mut self,
        groups: Vec<(Vec<ProcessId>, ProcessId)>,
    ) -> Result<(), CheckpointError> {
        let mut store = CheckpointStore::default();
        for (idx, (members, ch)) in groups.into_iter().enumerate() {
            for m in &members {
                if m.index() >= self.procs.len() {
                    return Err(CheckpointError::Machine(MachineError::UnknownProcess(*m)));
                }
                if store.group_of.insert(m.0, idx).is_some() {
                    return Err(CheckpointError::DemandFailed {
                        victim: *m,
                        reason: "process assigned to two groups".into(),
                    });
                }
            }
            store
                .groups
                .push(CheckpointGroup::new(members, ch, self.cfg.window_size));
        }
        self.store = store;
        Ok(())
    }

    pub fn checkpoint_store(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn group_of(&self, p: ProcessId) -> Option<&CheckpointGroup> {
        self.store
            .group_of
            .get(&p.0)
            .map(|&i| &self.store.groups[i])
    }

    pub(crate) fn group_index_of(&self, p: ProcessId) -> Option<usize> {
        self.store.group_of.get(&p.0).copied()
    }

    pub fn latest_checkpoint(&self, p: ProcessId) -> Option<&Checkpoint> {
        self.procs[p.index()].latest_ckpt.as_ref()
    }

    /// Captures one process under the epoch condition and folds the
    /// payload into its group parity.
    pub(crate) fn capture_checkpoint(
        &mut self,
        p: ProcessId,
        coordinated: bool,
        resume_tag: u64,
    ) -> Result<(Checkpoint, EventId), CheckpointError> {
        self.check_live(p)?;
        if !self.procs[p.index()].pending.is_empty() {
            return Err(CheckpointError::EpochOpen { p });
        }
        if self.procs[p.index()].lc != 0 {
            return Err(CheckpointError::LockHeld {
                p,
                held: self.procs[p.index()].lc,
            });
        }
        let seq = self.procs[p.index()].ckpt_seq;
        self.procs[p.index()].ckpt_seq += 1;
        let ev = self
            .graph
            .record(p, EventKind::Checkpoint { seq, coordinated });
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                owner: p,
                seq,
                counters: self.procs[p.index()].counters(),
                resume_tag,
            },
            payload: self.procs[p.index()].mem.clone(),
        };
        let old = self.procs[p.index()]
            .latest_ckpt
            .as_ref()
            .map(|c| c.payload.clone())
            .unwrap_or_else(|| vec![0; self.cfg.window_size]);
        if let Some(&gi) = self.store.group_of.get(&p.0) {
            self.store.groups[gi].xor_update(p, &old, &ckpt.payload);
            self.store.groups[gi].set_meta(ckpt.meta.clone());
        }
        self.procs[p.index()].latest_ckpt = Some(ckpt.clone());
        Ok((ckpt, ev))
    }

    fn check_live(&self, p: ProcessId) -> Result<(), CheckpointError> {
        if p.index() >= self.procs.len() {
            return Err(CheckpointError::Machine(MachineError::UnknownProcess(p)));
        }
        if self.procs[p.index()].crashed {
            return Err(CheckpointError::Machine(MachineError::CrashedProcess(p)));
        }
        Ok(())
    }

    /// The initial coordinated checkpoint: the pristine global state is
    /// a trivially consistent cut, so no synchronization is needed.
    pub fn bootstrap_checkpoint(&mut self, tags: &[u64]) -> Result<Vec<EventId>, CheckpointError> {
        self.coordinated_capture_all(tags)
    }

    fn coordinated_capture_all(&mut self, tags: &[u64]) -> Result<Vec<EventId>, CheckpointError> {
        let before = self.event_count();
        let live: Vec<ProcessId> = self.live_procs().collect();
        let mut set = BTreeMap::new();
        let mut events = Vec::with_capacity(live.len());
        for p in live {
            let tag = tags.get(p.index()).copied().unwrap_or(0);
            let (ckpt, ev) = self.capture_checkpoint(p, true, tag)?;
            set.insert(p.0, ckpt);
            events.push(ev);
        }
        self.store.coordinated = Some(set);
        self.store.cc_capture_history.push(events.clone());
        self.store.last_cc_end_event = self.event_count();
        self.store.last_cc_cost_events = self.event_count() - before;
        self.store.cc_count += 1;
        Ok(events)
    }

    /// The Gsync scheme: right after a completed gsync and before any
    /// further RMA calls, optionally enforce the global hb order with a
    /// barrier, then capture every live process.
    pub fn coordinated_checkpoint_gsync(
        &mut self,
        barrier: bool,
        tags: &[u64],
    ) -> Result<Vec<EventId>, CheckpointError> {
        if !self.at_gsync_point() {
            return Err(CheckpointError::NotAtGsyncPoint);
        }
        let before = self.event_count();
        if barrier {
            self.barrier()?;
        }
        let mut events = self.coordinated_capture_all(tags)?;
        self.store.last_cc_cost_events = self.event_count() - before;
        events.sort();
        Ok(events)
    }

    /// Finishes a phased Locks-scheme checkpoint: every participant has
    /// already flushed at its own LC = 0 point; the barrier and the
    /// collective captures remain.
    pub(crate) fn locks_cc_finish(&mut self, tags: &[u64]) -> Result<Vec<EventId>, CheckpointError> {
        for p in self.live_procs().collect::<Vec<_>>() {
            if self.lc(p) != 0 {
                return Err(CheckpointError::LockHeld {
                    p,
                    held: self.lc(p),
                });
            }
        }
        let before = self.event_count();
        self.barrier()?;
        let mut events = self.coordinated_capture_all(tags)?;
        self.store.last_cc_cost_events = self.event_count() - before;
        events.sort();
        Ok(events)
    }

    /// The Locks scheme: once no process holds a lock, each process
    /// flushes to everyone, a barrier establishes the global hb order,
    /// and the captures run collectively.
    pub fn coordinated_checkpoint_locks(
        &mut self,
        tags: &[u64],
    ) -> Result<LocksCheckpointOutcome, CheckpointError> {
        let holding: Vec<ProcessId> = self
            .live_procs()
            .filter(|&p| self.lc(p) > 0)
            .collect();
        if !holding.is_empty() {
            return Ok(LocksCheckpointOutcome::Deferred { holding });
        }
        let before = self.event_count();
        let live: Vec<ProcessId> = self.live_procs().collect();
        for &p in &live {
            self.sync(SyncKind::Flush, p, Target::All, None)?;
        }
        for &p in &live {
            if self.lc(p) != 0 {
                return Err(CheckpointError::LockHeld {
                    p,
                    held: self.lc(p),
                });
            }
        }
        self.barrier()?;
        let mut events = self.coordinated_capture_all(tags)?;
        self.store.last_cc_cost_events = self.event_count() - before;
        events.sort();
        Ok(LocksCheckpointOutcome::Done(events))
    }

    /// Forces `victim` to take an uncoordinated checkpoint so that
    /// `requester` can trim its logs about it. The victim closes its
    /// epochs, captures under its structure lock, and the confirmation
    /// carries the counters the trim needs.
    pub fn demand_checkpoint(
        &mut self,
        requester: ProcessId,
        victim: ProcessId,
        resume_tag: u64,
    ) -> Result<DemandOutcome, CheckpointError> {
        self.check_live(requester)?;
        if victim.index() >= self.procs.len() {
            return Err(CheckpointError::Machine(MachineError::UnknownProcess(
                victim,
            )));
        }
        if self.procs[victim.index()].crashed {
            return Err(CheckpointError::DemandFailed {
                victim,
                reason: "victim crashed; requester must keep its logs".into(),
            });
        }
        if requester == victim {
            return Err(CheckpointError::DemandFailed {
                victim,
                reason: "a process does not demand-checkpoint itself".into(),
            });
        }
        if self.lc(victim) > 0 {
            return Ok(DemandOutcome::Deferred {
                reason: format!("{victim} holds {} lock(s)", self.lc(victim)),
            });
        }
        if self.is_gsync_waiting(victim) {
            return Ok(DemandOutcome::Deferred {
                reason: format!("{victim} is waiting in a gsync round"),
            });
        }
        match self.sync(
            SyncKind::Lock,
            victim,
            Target::One(victim),
            Some(StructureId::CheckpointState),
        )? {
            SyncOutcome::Done(_) => {}
            SyncOutcome::Blocked => {
                return Ok(DemandOutcome::Deferred {
                    reason: format!("{victim}'s checkpoint structures are locked"),
                })
            }
            other => {
                return Err(CheckpointError::Machine(MachineError::ProtocolOrder(
                    format!("unexpected lock outcome {other:?}"),
                )))
            }
        }
        if !self.procs[victim.index()].pending.is_empty() {
            self.sync(SyncKind::Flush, victim, Target::All, None)?;
        }
        let capture = self.capture_checkpoint(victim, false, resume_tag);
        self.sync(
            SyncKind::Unlock,
            victim,
            Target::One(victim),
            Some(StructureId::CheckpointState),
        )?;
        capture?;
        Ok(DemandOutcome::Done(CkptConfirmation {
            epoch: self.epoch(requester, victim),
            gnc: self.gnc(victim),
            gc: self.gc(victim),
            sc: self.sc_at(victim),
        }))
    }

    pub(crate) fn is_gsync_waiting(&self, p: ProcessId) -> bool {
        self.gsync_waiting_contains(p)
    }

    /// Whether enough simulated time has passed since the last
    /// coordinated checkpoint. The checkpoint cost is estimated from
    /// the event count the previous one consumed, scaled by the
    /// seconds-per-event constant.
    pub fn daly_checkpoint_due(&self, mtbf_seconds: f64, seconds_per_event: f64) -> bool {
        if self.store.cc_count == 0 {
            return true;
        }
        let delta = (self.store.last_cc_cost_events.max(1) as f64) * seconds_per_event;
        let interval = match daly_interval(&DalyParams {
            delta,
            mtbf: mtbf_seconds,
        }) {
            Ok(v) => v,
            Err(_) => return true,
        };
        let elapsed = (self.event_count() - self.store.last_cc_end_event) as f64 * seconds_per_event;
        elapsed >= interval
    }
}
