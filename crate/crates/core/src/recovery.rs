//! Causal recovery of a failed process from its reconstructed
//! checkpoint plus the logs stored at its peers.
//!
//! The gsync variant fetches put and get logs from every peer after
//! checking the N and M flags, then replays strata of minimum gsync
//! counter; within a stratum it replays minimum-epoch puts and
//! minimum-get-counter gets. The locks variant fetches puts only,
//! checks M alone, and orders strata by the synchronization counter.
//! Either variant falls back to the last coordinated checkpoint when a
//! flag shows the logs cannot reproduce the pre-crash state.
//!
//! Every recovery re-verifies the replay guarantees: each fetched
//! action is replayed exactly once, and the stratum counters never
//! decrease along the replay trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::RecoveryError;
use crate::logging::LogState;
use crate::machine::action::{
    AccessData, AccessKind, Action, Determinant, ProcessId, StructureId, SyncKind, Target,
};
use crate::machine::order::EventKind;
use crate::machine::{CounterState, Machine, SyncOutcome};

/// Which synchronization discipline the failed workload used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryScheme {
    /// Codes that synchronize with gsyncs (puts and gets).
    Gsync,
    /// Codes that synchronize with locks and communicate with puts.
    Locks,
}

/// Why a recovery abandoned replay and rolled everyone back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    /// N_q[p_f] was raised: an unfinished non-blocking get.
    NonBlockingGet { peer: ProcessId },
    /// M_q[p_f] was raised: replay could double-apply a combining put.
    CombiningPut { peer: ProcessId },
    /// A peer still had unpublished (optimistically delayed) log
    /// entries for the failed process; replaying without them could
    /// orphan a third process.
    UnflushedLog { peer: ProcessId },
}

/// Instrumentation record of one recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryPlan {
    pub failed: ProcessId,
    pub replacement: ProcessId,
    pub scheme: RecoveryScheme,
    pub fetched_puts: usize,
    pub fetched_gets: usize,
    pub fallback: bool,
    pub fallback_reason: Option<FallbackReason>,
    /// Replayed determinants in replay order.
    pub replay_trace: Vec<Determinant>,
    /// Violated replay guarantees; empty on a correct run.
    pub violations: Vec<String>,
}

impl RecoveryPlan {
    pub fn replay_trace_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.replay_trace {
            out.push_str(&serde_json::to_string(d).expect("determinant serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum RecoveryOutcome {
    Replayed(RecoveryPlan),
    FellBack(RecoveryPlan),
}

impl RecoveryOutcome {
    pub fn plan(&self) -> &RecoveryPlan {
        match self {
            RecoveryOutcome::Replayed(p) | RecoveryOutcome::FellBack(p) => p,
        }
    }
}

/// Recovery for gsync-synchronized codes (Algorithm-2 style ordering).
pub fn recover_gsync(machine: &mut Machine, failed: ProcessId) -> Result<RecoveryOutcome, RecoveryError> {
    recover(machine, failed, RecoveryScheme::Gsync)
}

/// Recovery for lock-synchronized, put-only codes (Algorithm-3 style
/// ordering). The N flags need not be checked.
pub fn recover_locks(machine: &mut Machine, failed: ProcessId) -> Result<RecoveryOutcome, RecoveryError> {
    recover(machine, failed, RecoveryScheme::Locks)
}

fn stratum_key(scheme: RecoveryScheme, d: &Determinant) -> u64 {
    match scheme {
        RecoveryScheme::Gsync => d.stamp.gnc,
        RecoveryScheme::Locks => d.stamp.sc,
    }
}

fn recover(
    machine: &mut Machine,
    failed: ProcessId,
    scheme: RecoveryScheme,
) -> Result<RecoveryOutcome, RecoveryError> {
    if !machine.is_crashed(failed) {
        return Err(RecoveryError::NotCrashed(failed));
    }
    // The batch system allocates a replacement; in simulation it
    // reuses the failed process's id.
    let replacement = failed;
    machine.graph.record(replacement, EventKind::RecoveryStart { failed });

    // The reconstructed image becomes the replacement's latest
    // checkpoint again; the group parity still carries it.
    let ckpt = reconstruct_checkpoint(machine, failed)?;
    machine.revive(replacement, ckpt.payload.clone(), &ckpt.meta.counters);
    machine.procs[replacement.index()].latest_ckpt = Some(ckpt);

    let mut plan = RecoveryPlan {
        failed,
        replacement,
        scheme,
        fetched_puts: 0,
        fetched_gets: 0,
        fallback: false,
        fallback_reason: None,
        replay_trace: Vec::new(),
        violations: Vec::new(),
    };

    // Gather the logs under per-peer locks, checking the flags.
    let mut put_logs: Vec<(ProcessId, Action)> = Vec::new();
    let mut get_logs: Vec<(ProcessId, Action)> = Vec::new();
    for q in 0..machine.n_procs() {
        let q = ProcessId(q);
        if q == replacement {
            continue;
        }
        if machine.is_crashed(q) {
            return Err(RecoveryError::Catastrophic(format!(
                "peer {q} crashed while fetching logs for {failed}"
            )));
        }
        lock_peer(machine, replacement, q)?;
        if scheme == RecoveryScheme::Gsync && machine.n_flag(q, failed) {
            plan.fallback = true;
            plan.fallback_reason = Some(FallbackReason::NonBlockingGet { peer: q });
        } else if machine.m_flag(q, failed) {
            plan.fallback = true;
            plan.fallback_reason = Some(FallbackReason::CombiningPut { peer: q });
        } else if machine.staged_put_count(q, failed) > 0 {
            plan.fallback = true;
            plan.fallback_reason = Some(FallbackReason::UnflushedLog { peer: q });
        }
        if plan.fallback {
            unlock_peer(machine, replacement, q)?;
            break;
        }
        for a in machine.put_log(q, failed) {
            put_logs.push((q, a));
        }
        if scheme == RecoveryScheme::Gsync {
            for a in machine.get_log(q, failed) {
                get_logs.push((q, a));
            }
        }
        unlock_peer(machine, replacement, q)?;
    }

    if plan.fallback {
        machine
            .graph
            .record(replacement, EventKind::RecoveryEnd { fell_back: true });
        fallback_rollback(machine)?;
        return Ok(RecoveryOutcome::FellBack(plan));
    }

    plan.fetched_puts = put_logs.len();
    plan.fetched_gets = get_logs.len();
    let fetched: Vec<Determinant> = put_logs
        .iter()
        .chain(get_logs.iter())
        .map(|(_, a)| a.determinant())
        .collect();
    check_set_property(&put_logs, &get_logs, &mut plan.violations);

    // Replay causally: strata of minimum GNC (or SC), and within each
    // stratum minimum-EC puts then minimum-GC gets, until nothing is
    // left. Ties across peers replay in ascending peer id.
    while !put_logs.is_empty() || !get_logs.is_empty() {
        let stratum = put_logs
            .iter()
            .chain(get_logs.iter())
            .map(|(_, a)| stratum_key(scheme, &a.determinant()))
            .min()
            .expect("nonempty");
        loop {
            let min_ec = put_logs
                .iter()
                .filter(|(_, a)| stratum_key(scheme, &a.determinant()) == stratum)
                .map(|(_, a)| a.stamp.ec)
                .min();
            let min_gc = get_logs
                .iter()
                .filter(|(_, a)| stratum_key(scheme, &a.determinant()) == stratum)
                .map(|(_, a)| a.stamp.gc)
                .min();
            if min_ec.is_none() && min_gc.is_none() {
                break;
            }
            if let Some(ec) = min_ec {
                let batch = drain_where(&mut put_logs, |(_, a)| {
                    stratum_key(scheme, &a.determinant()) == stratum && a.stamp.ec == ec
                });
                for (_, a) in batch {
                    replay_action(machine, replacement, &a, &mut plan.replay_trace);
                }
            }
            if let Some(gc) = min_gc {
                let batch = drain_where(&mut get_logs, |(_, a)| {
                    stratum_key(scheme, &a.determinant()) == stratum && a.stamp.gc == gc
                });
                for (_, a) in batch {
                    replay_action(machine, replacement, &a, &mut plan.replay_trace);
                }
            }
        }
    }

    check_exactly_once(&fetched, &plan.replay_trace, &mut plan.violations);
    check_replay_order(scheme, &plan.replay_trace, &mut plan.violations);

    machine
        .graph
        .record(replacement, EventKind::RecoveryEnd { fell_back: false });
    Ok(RecoveryOutcome::Replayed(plan))
}

/// Reconstructs the failed process's latest checkpoint from its group
/// parity and the surviving members' payloads. A process that was
/// never grouped (or never checkpointed) restores the pristine state.
fn reconstruct_checkpoint(
    machine: &Machine,
    failed: ProcessId,
) -> Result<crate::checkpoint::Checkpoint, RecoveryError> {
    use crate::checkpoint::{Checkpoint, CheckpointMeta};
    let window = machine.config().window_size;
    let zero_meta = || CheckpointMeta {
        owner: failed,
        seq: 0,
        counters: CounterState {
            epoch_row: vec![0; machine.n_procs() as usize],
            ..CounterState::default()
        },
        resume_tag: 0,
    };
    let Some(group) = machine.group_of(failed) else {
        return Ok(Checkpoint {
            meta: zero_meta(),
            payload: vec![0; window],
        });
    };
    let mut survivors = Vec::new();
    for &m in &group.members {
        if m == failed {
            continue;
        }
        if machine.is_crashed(m) {
            return Err(RecoveryError::Catastrophic(format!(
                "{m} and {failed} are lost in the same group"
            )));
        }
        let payload = machine
            .latest_checkpoint(m)
            .map(|c| c.payload.clone())
            .unwrap_or_else(|| vec![0; window]);
        survivors.push((m, payload));
    }
    let payload = group.xor_recover(failed, &survivors)?;
    let meta = group.member_meta(failed).cloned().unwrap_or_else(zero_meta);
    Ok(Checkpoint { meta, payload })
}

fn lock_peer(machine: &mut Machine, me: ProcessId, q: ProcessId) -> Result<(), RecoveryError> {
    match machine.sync(SyncKind::Lock, me, Target::One(q), Some(StructureId::PutLog))? {
        SyncOutcome::Done(_) => Ok(()),
        other => Err(RecoveryError::Catastrophic(format!(
            "could not lock logs at {q}: {other:?}"
        ))),
    }
}

fn unlock_peer(machine: &mut Machine, me: ProcessId, q: ProcessId) -> Result<(), RecoveryError> {
    machine.sync(SyncKind::Unlock, me, Target::One(q), Some(StructureId::PutLog))?;
    Ok(())
}

/// Applies one logged action to the replacement's committed memory.
/// Effects were already globally visible before the crash, so no epoch
/// machinery or re-logging is involved; gets only restore the replayed
/// trace, their data flows into no window cell.
fn replay_action(
    machine: &mut Machine,
    replacement: ProcessId,
    a: &Action,
    trace: &mut Vec<Determinant>,
) {
    if a.kind == AccessKind::Put {
        debug_assert_eq!(a.trg, replacement);
        if let AccessData::Put { cell, value } = a.data {
            let mem = &mut machine.procs[replacement.index()].mem[cell];
            *mem = if a.combine {
                mem.wrapping_add(value)
            } else {
                value
            };
        }
    }
    machine.graph.record(
        replacement,
        EventKind::Replay {
            determinant: a.determinant(),
        },
    );
    trace.push(a.determinant());
}

fn drain_where<T>(v: &mut Vec<T>, mut pred: impl FnMut(&T) -> bool) -> Vec<T> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        if pred(&v[i]) {
            out.push(v.remove(i));
        } else {
            i += 1;
        }
    }
    out
}

/// The fetched logs are sets: a fully identical entry appearing twice
/// means a corrupted log.
fn check_set_property(
    puts: &[(ProcessId, Action)],
    gets: &[(ProcessId, Action)],
    violations: &mut Vec<String>,
) {
    for family in [puts, gets] {
        for (i, (p1, a1)) in family.iter().enumerate() {
            for (p2, a2) in family.iter().skip(i + 1) {
                if p1 == p2 && a1 == a2 {
                    violations.push(format!(
                        "duplicate log entry fetched from {p1}: {a1:?}"
                    ));
                }
            }
        }
    }
}

/// Each fetched action must be replayed exactly once: equal lengths and
/// equal determinant multisets.
fn check_exactly_once(
    fetched: &[Determinant],
    trace: &[Determinant],
    violations: &mut Vec<String>,
) {
    if fetched.len() != trace.len() {
        violations.push(format!(
            "exactly-once violated: {} fetched, {} replayed",
            fetched.len(),
            trace.len()
        ));
    }
    let mut want: BTreeMap<Determinant, i64> = BTreeMap::new();
    for d in fetched {
        *want.entry(*d).or_default() += 1;
    }
    for d in trace {
        *want.entry(*d).or_default() -= 1;
    }
    if want.values().any(|&c| c != 0) {
        violations.push("exactly-once violated: replay trace is not the fetched multiset".into());
    }
}

/// The stratum counter must never decrease along the trace, and within
/// one stratum put epochs and get counters must be non-decreasing.
fn check_replay_order(scheme: RecoveryScheme, trace: &[Determinant], violations: &mut Vec<String>) {
    let mut last_key = 0u64;
    let mut last_ec = 0u64;
    let mut last_gc = 0u64;
    for d in trace {
        let key = stratum_key(scheme, d);
        if key < last_key {
            violations.push(format!(
                "stratum counter decreased: {key} after {last_key}"
            ));
        }
        if key > last_key {
            last_key = key;
            last_ec = 0;
            last_gc = 0;
        }
        match d.kind {
            AccessKind::Put => {
                if d.stamp.ec < last_ec {
                    violations.push(format!(
                        "put epoch decreased within stratum {key}: {} after {last_ec}",
                        d.stamp.ec
                    ));
                }
                last_ec = d.stamp.ec;
            }
            AccessKind::Get => {
                if d.stamp.gc < last_gc {
                    violations.push(format!(
                        "get counter decreased within stratum {key}: {} after {last_gc}",
                        d.stamp.gc
                    ));
                }
                last_gc = d.stamp.gc;
            }
        }
    }
}

/// Rolls every process back to the last coordinated checkpoint: windows
/// and counters reset to the captured set, all logs cleared, locks and
/// collective state released. Idempotent.
pub fn fallback_rollback(machine: &mut Machine) -> Result<(), RecoveryError> {
    let set = machine
        .store
        .coordinated
        .clone()
        .ok_or(RecoveryError::NoCoordinatedCheckpoint)?;
    for i in 0..machine.procs.len() {
        let p = ProcessId(i as u32);
        let ckpt = set.get(&p.0).ok_or_else(|| {
            RecoveryError::Catastrophic(format!(
                "coordinated set has no payload for {p}"
            ))
        })?;
        machine.graph.record(p, EventKind::Fallback);
        // Keep the group parity honest: the member's latest payload
        // becomes the coordinated one again.
        let old = machine.procs[i]
            .latest_ckpt
            .as_ref()
            .map(|c| c.payload.clone())
            .unwrap_or_else(|| vec![0; machine.config().window_size]);
        if let Some(gi) = machine.group_index_of(p) {
            machine.store.groups[gi].xor_update(p, &old, &ckpt.payload);
            machine.store.groups[gi].set_meta(ckpt.meta.clone());
        }
        let st = &mut machine.procs[i];
        st.mem = ckpt.payload.clone();
        st.set_counters(&ckpt.meta.counters);
        st.crashed = false;
        st.pending.clear();
        st.logs = LogState::default();
        st.latest_ckpt = Some(ckpt.clone());
    }
    machine.reset_sync_state();
    Ok(())
}
