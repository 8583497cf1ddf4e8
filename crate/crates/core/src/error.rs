//! Error types shared across the crate.

use thiserror::Error;

use crate::machine::action::{ProcessId, StructureId};

/// Errors raised by the simulated RMA machine.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("cell index {cell} out of bounds for window of {len} words")]
    OutOfBounds { cell: usize, len: usize },

    #[error("process {0} does not exist")]
    UnknownProcess(ProcessId),

    #[error("process {0} has crashed")]
    CrashedProcess(ProcessId),

    #[error("source and target must differ (process {0})")]
    SelfTarget(ProcessId),

    #[error("process {p} does not hold the lock on ({trg}, {structure:?})")]
    UnlockWithoutLock {
        p: ProcessId,
        trg: ProcessId,
        structure: Option<StructureId>,
    },

    #[error("gsync must target all processes")]
    GsyncTarget,

    #[error("no further progress possible: all runnable processes are blocked")]
    Deadlock,

    #[error("protocol order violated: {0}")]
    ProtocolOrder(String),

    #[error("unknown event id {0}")]
    UnknownEvent(usize),
}

/// Errors raised by checkpointing operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("coordinated checkpoint requires a gsync point with no later RMA calls")]
    NotAtGsyncPoint,

    #[error("process {p} still has open epochs; the epoch condition forbids capture")]
    EpochOpen { p: ProcessId },

    #[error("process {p} holds {held} lock(s) at a capture or barrier")]
    LockHeld { p: ProcessId, held: u64 },

    #[error("checkpoint of {victim} failed: {reason}")]
    DemandFailed { victim: ProcessId, reason: String },

    #[error("daly parameters must be positive: delta={delta}, mtbf={mtbf}")]
    BadDalyParams { delta: f64, mtbf: f64 },

    #[error("machine error: {0}")]
    Machine(#[from] MachineError),
}

/// Errors raised during recovery of a failed process.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecoveryError {
    #[error("catastrophic failure: {0}")]
    Catastrophic(String),

    #[error("no coordinated checkpoint has ever been taken")]
    NoCoordinatedCheckpoint,

    #[error("process {0} is not crashed; nothing to recover")]
    NotCrashed(ProcessId),

    #[error("machine error: {0}")]
    Machine(#[from] MachineError),
}

/// Errors from the analytic topology / reliability model.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("t-aware placement infeasible at level {level} ({name}): group size {group_size} exceeds {available} elements")]
    Infeasible {
        level: usize,
        name: String,
        group_size: usize,
        available: usize,
    },

    #[error("invalid machine profile: {0}")]
    BadProfile(String),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("group count {groups} does not divide {n} processes evenly")]
    GroupArithmetic { n: u64, groups: u64 },

    #[error("cannot fit a distribution to {0} distinct bins")]
    DegenerateFit(usize),
}

/// Errors around scenario parsing, validation and execution.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error("fault plan entry for {victim} at event {index} lies beyond the trace ({events} events)")]
    FaultBeyondTrace {
        victim: ProcessId,
        index: u64,
        events: u64,
    },

    #[error("scenario deadlocked: {0}")]
    Deadlock(String),

    #[error("machine error: {0}")]
    Machine(#[from] MachineError),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}
