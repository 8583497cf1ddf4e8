//! Fault-tolerance protocols for Remote Memory Access programming,
//! runnable as a deterministic simulation.
//!
//! The crate provides:
//!
//! - [`machine`]: a simulated RMA abstract machine with epoch-buffered
//!   puts and gets, the four synchronization categories, counter
//!   stamping, and an event graph answering po/so/co/hb/cohb queries;
//! - [`logging`]: transparent put/get logging with the N and M safety
//!   flags and checkpoint-driven log trimming;
//! - [`checkpoint`]: coordinated (gsync and locks schemes) and demand
//!   checkpointing, XOR checksum groups, and the Daly interval;
//! - [`recovery`]: causal replay of a failed process from remote logs,
//!   with fallback to the last coordinated checkpoint;
//! - [`topology`]: failure-domain hierarchies, t-aware placement, and
//!   the analytic catastrophic-failure probability model;
//! - [`sim`]: seed-deterministic scenarios with workload generators,
//!   fault injection, and oracle verification.

pub mod checkpoint;
pub mod error;
pub mod logging;
pub mod machine;
pub mod recovery;
pub mod sim;
pub mod topology;

pub use checkpoint::{
    daly_interval, rma_consistency_check, Checkpoint, CheckpointGroup, CheckpointMeta,
    CkptConfirmation, ConsistencyResult, DalyParams, DemandOutcome, LocksCheckpointOutcome,
};
pub use error::{CheckpointError, MachineError, RecoveryError, ScenarioError, TopologyError};
pub use machine::action::{
    AccessData, AccessKind, Action, CounterStamp, Determinant, ProcessId, StructureId, SyncAction,
    SyncKind, Target, Word,
};
pub use machine::order::{ActionId, EventId, EventKind, OrderGraph, OrderRelation, OrderResult};
pub use machine::{CounterState, Machine, MachineConfig, ResumeContext, SyncOutcome};
pub use recovery::{
    fallback_rollback, recover_gsync, recover_locks, FallbackReason, RecoveryOutcome, RecoveryPlan,
    RecoveryScheme,
};
pub use sim::{reference_run, run_scenario, Report, Scenario};
pub use topology::{
    fit_pdf, make_taware_placement, p_cf, p_conditional, validate_taware, FailurePdf, FdHierarchy,
    FdLevel, MachineProfile, PcfQuery, Placement, TawareResult,
};
