//! Scenario-driven, seed-deterministic execution: workload generation,
//! fail-stop fault injection, recovery, and oracle verification.
//!
//! A [`Scenario`] fully determines a run: the deterministic scheduler
//! interleaves the generated per-process programs round-robin, the
//! fault plan crashes processes at fixed positions of the global event
//! sequence, and the matching recovery scheme brings them back (or
//! rolls everyone back to the last coordinated checkpoint). The
//! resulting [`Report`] carries the final memory digest, the replay
//! instrumentation of every recovery, and any violated invariant.

pub mod workload;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::DemandOutcome;
use crate::error::{RecoveryError, ScenarioError};
use crate::machine::action::{AccessKind, Determinant, ProcessId, SyncKind, Target};
use crate::machine::order::{EventKind, LockKey};
use crate::machine::{Machine, MachineConfig, SyncOutcome};
use crate::recovery::{
    recover_gsync, recover_locks, FallbackReason, RecoveryOutcome, RecoveryScheme,
};
pub use workload::{Op, WorkloadMeta, WorkloadSpec};

/// Daly gating inputs for coordinated checkpoints in simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DalyConfig {
    pub mtbf_seconds: f64,
    pub seconds_per_event: f64,
}

/// Protocol knobs of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Checkpoint groups; one checksum process is added per group.
    #[serde(default = "default_groups")]
    pub groups: u32,
    /// Informational t-awareness level for the process placement.
    #[serde(default)]
    pub t_aware_level: u32,
    /// Demand checkpoints fire once a process stores more log entries.
    #[serde(default)]
    pub log_budget: Option<usize>,
    /// Daly-gated coordinated checkpointing.
    #[serde(default)]
    pub daly: Option<DalyConfig>,
    /// Plain event-count gate used when no Daly config is given.
    #[serde(default)]
    pub cc_interval_events: Option<u64>,
    #[serde(default = "default_true")]
    pub gsync_adds_hb: bool,
    #[serde(default = "default_true")]
    pub access_deterministic: bool,
    #[serde(default = "default_true")]
    pub gsync_ckpt_barrier: bool,
    #[serde(default)]
    pub optimistic_delay: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            groups: 1,
            t_aware_level: 0,
            log_budget: None,
            daly: None,
            cc_interval_events: None,
            gsync_adds_hb: true,
            access_deterministic: true,
            gsync_ckpt_barrier: true,
            optimistic_delay: false,
        }
    }
}

fn default_groups() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

/// One injected fail-stop fault: the victim crashes as soon as the
/// global event counter passes the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub victim: u32,
    pub event_index: u64,
}

/// Deliberate damage applied to protocol state before recovery runs;
/// used to prove the replay assertions can fail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Corruption {
    DuplicateLogEntry {
        owner: u32,
        peer: u32,
        kind: AccessKind,
        index: usize,
    },
}

/// A reproducible simulation script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Computing processes; checksum processes are added on top.
    pub n_procs: u32,
    pub window_size: usize,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn scheme(&self) -> RecoveryScheme {
        match self.workload {
            WorkloadSpec::LockPut { .. } => RecoveryScheme::Locks,
            _ => RecoveryScheme::Gsync,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n_procs < 2 {
            return Err(ScenarioError::Validation(
                "need at least two computing processes".into(),
            ));
        }
        if self.window_size == 0 {
            return Err(ScenarioError::Validation("window must be non-empty".into()));
        }
        if self.protocol.groups == 0 || !self.n_procs.is_multiple_of(self.protocol.groups) {
            return Err(ScenarioError::Validation(format!(
                "{} groups do not evenly divide {} processes",
                self.protocol.groups, self.n_procs
            )));
        }
        if let Some(0) = self.protocol.log_budget {
            return Err(ScenarioError::Validation("log budget must be positive".into()));
        }
        for f in &self.faults {
            if f.victim >= self.n_procs {
                return Err(ScenarioError::Validation(format!(
                    "fault victim {} is not a computing process",
                    f.victim
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultOutcome {
    pub victim: u32,
    pub event_index: u64,
    pub fell_back: bool,
    pub fallback_reason: Option<FallbackReason>,
    pub fetched_puts: usize,
    pub fetched_gets: usize,
    /// Whether any peer's M flag named the victim at crash time.
    pub victim_targeted_by_combining: bool,
    pub replay_trace: Vec<Determinant>,
}

/// Everything a run reports; a pure function of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub final_memory_digest: String,
    pub event_count: u64,
    pub recoveries: u32,
    pub fallbacks: u32,
    pub cf: bool,
    pub cf_reason: Option<String>,
    pub replayed_puts: u64,
    pub replayed_gets: u64,
    pub coordinated_checkpoints: u64,
    pub demand_checkpoints: u64,
    pub trimmed_entries: u64,
    /// Result of the access-determinism check over the whole trace.
    pub access_deterministic: bool,
    pub workload_meta: WorkloadMeta,
    pub fault_outcomes: Vec<FaultOutcome>,
    /// Violated invariants; exit-code 1 material for the CLI.
    pub assertion_failures: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ExecState {
    Ready,
    GsyncWait,
    /// Flushed for a phased Locks-scheme checkpoint; waiting for the
    /// other participants to reach their LC = 0 points.
    CcBarrier,
    Finished,
}

struct Engine {
    scenario: Scenario,
    machine: Machine,
    programs: Vec<Vec<Op>>,
    pcs: Vec<usize>,
    states: Vec<ExecState>,
    /// Locks to re-acquire before a recovered process may continue.
    resume_locks: Vec<VecDeque<LockKey>>,
    faults: VecDeque<FaultSpec>,
    corruptions_applied: bool,
    known_rounds: u64,
    /// A Locks-scheme checkpoint is underway.
    locks_cc_pending: bool,
    cc_ready: Vec<bool>,
    report: Report,
    run_over: bool,
}

/// Runs a scenario to completion and reports on it.
pub fn run_scenario(scenario: &Scenario) -> Result<Report, ScenarioError> {
    Ok(run_scenario_full(scenario)?.0)
}

/// Like [`run_scenario`], additionally handing back the final machine
/// for log and checkpoint inspection.
pub fn run_scenario_full(scenario: &Scenario) -> Result<(Report, Machine), ScenarioError> {
    Engine::new(scenario.clone())?.run()
}

/// The fault-free oracle: the same workload with the fault plan and
/// corruptions stripped.
pub fn reference_run(scenario: &Scenario) -> Result<Report, ScenarioError> {
    let mut s = scenario.clone();
    s.faults.clear();
    s.corruptions.clear();
    run_scenario(&s)
}

impl Engine {
    fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let generated = workload::generate(
            &scenario.workload,
            scenario.n_procs,
            scenario.window_size,
            scenario.seed,
        )?;
        let n_cm = scenario.n_procs;
        let groups = scenario.protocol.groups;
        let n_total = n_cm + groups;
        let cfg = MachineConfig {
            n_procs: n_total,
            window_size: scenario.window_size,
            gsync_adds_hb: scenario.protocol.gsync_adds_hb,
            access_deterministic: scenario.protocol.access_deterministic,
            optimistic_delay: scenario.protocol.optimistic_delay,
        };
        let mut machine = Machine::new(cfg);
        let per_group = (n_cm / groups) as usize;
        let group_spec: Vec<(Vec<ProcessId>, ProcessId)> = (0..groups)
            .map(|g| {
                let members = (0..per_group)
                    .map(|k| ProcessId(g * per_group as u32 + k as u32))
                    .collect();
                (members, ProcessId(n_cm + g))
            })
            .collect();
        machine.configure_groups(group_spec)?;
        machine.set_collective((0..n_cm).map(ProcessId));
        machine.bootstrap_checkpoint(&vec![0; n_total as usize])?;

        let mut programs = generated.programs;
        programs.resize(n_total as usize, Vec::new());
        let states = programs
            .iter()
            .map(|p| {
                if p.is_empty() {
                    ExecState::Finished
                } else {
                    ExecState::Ready
                }
            })
            .collect();
        let mut faults: Vec<FaultSpec> = scenario.faults.clone();
        faults.sort_by_key(|f| (f.event_index, f.victim));
        let seed = scenario.seed;
        let meta = generated.meta;
        Ok(Engine {
            machine,
            programs,
            pcs: vec![0; n_total as usize],
            states,
            resume_locks: vec![VecDeque::new(); n_total as usize],
            faults: faults.into(),
            corruptions_applied: false,
            known_rounds: 0,
            locks_cc_pending: false,
            cc_ready: vec![false; n_total as usize],
            report: Report {
                seed,
                final_memory_digest: String::new(),
                event_count: 0,
                recoveries: 0,
                fallbacks: 0,
                cf: false,
                cf_reason: None,
                replayed_puts: 0,
                replayed_gets: 0,
                coordinated_checkpoints: 1, // bootstrap
                demand_checkpoints: 0,
                trimmed_entries: 0,
                access_deterministic: true,
                workload_meta: meta,
                fault_outcomes: Vec::new(),
                assertion_failures: Vec::new(),
            },
            scenario,
            run_over: false,
        })
    }

    fn all_finished(&self) -> bool {
        self.states.iter().all(|s| *s == ExecState::Finished)
            && self.resume_locks.iter().all(VecDeque::is_empty)
    }

    fn run(mut self) -> Result<(Report, Machine), ScenarioError> {
        while !self.all_finished() && !self.run_over {
            let mut progressed = false;
            for p in 0..self.scenario.n_procs {
                if self.run_over {
                    break;
                }
                if self.step(ProcessId(p))? {
                    progressed = true;
                }
                self.post_step()?;
            }
            if !progressed && !self.all_finished() && !self.run_over {
                let waiting: Vec<String> = self
                    .states
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| **s != ExecState::Finished)
                    .map(|(i, s)| format!("p{i}:{s:?}"))
                    .collect();
                return Err(ScenarioError::Deadlock(waiting.join(", ")));
            }
        }
        if !self.faults.is_empty() && !self.run_over {
            let f = self.faults[0];
            return Err(ScenarioError::FaultBeyondTrace {
                victim: ProcessId(f.victim),
                index: f.event_index,
                events: self.machine.event_count(),
            });
        }
        self.finalize()
    }

    /// Executes (or retries) one operation of one process. Returns
    /// whether anything progressed.
    fn step(&mut self, p: ProcessId) -> Result<bool, ScenarioError> {
        match self.states[p.index()] {
            ExecState::Finished | ExecState::GsyncWait | ExecState::CcBarrier => {
                return Ok(false)
            }
            ExecState::Ready => {}
        }
        // A pending Locks-scheme checkpoint: join at the first LC = 0
        // point by flushing and entering the barrier. A process stuck
        // inside a blocked lock call is not at such a point.
        if self.locks_cc_pending
            && !self.cc_ready[p.index()]
            && self.machine.lc(p) == 0
            && !self.machine.is_lock_queued(p)
            && self.resume_locks[p.index()].is_empty()
        {
            self.machine.sync(SyncKind::Flush, p, Target::All, None)?;
            self.cc_ready[p.index()] = true;
            self.states[p.index()] = ExecState::CcBarrier;
            return Ok(true);
        }
        // A recovered process first re-acquires the locks it held.
        if let Some(&key) = self.resume_locks[p.index()].front() {
            return match self.machine.sync(
                SyncKind::Lock,
                p,
                Target::One(key.owner),
                key.structure,
            )? {
                SyncOutcome::Done(_) => {
                    self.resume_locks[p.index()].pop_front();
                    Ok(true)
                }
                SyncOutcome::Blocked => Ok(false),
                other => Err(ScenarioError::Validation(format!(
                    "unexpected lock outcome {other:?}"
                ))),
            };
        }
        let pc = self.pcs[p.index()];
        let Some(op) = self.programs[p.index()].get(pc).cloned() else {
            self.states[p.index()] = ExecState::Finished;
            return Ok(false);
        };
        let mut advance = true;
        let mut progressed = true;
        match op {
            Op::Put {
                trg,
                cell,
                value,
                combine,
                blocking,
            } => {
                self.machine
                    .issue_put(p, ProcessId(trg), cell, value, combine, blocking)?;
            }
            Op::Get { trg, cell, blocking } => {
                self.machine.issue_get(p, ProcessId(trg), cell, blocking)?;
            }
            Op::Atomic { trg, cell, add } => {
                self.machine.issue_atomic(p, ProcessId(trg), cell, add)?;
            }
            Op::Flush { trg } => {
                let target = match trg {
                    Some(q) => Target::One(ProcessId(q)),
                    None => Target::All,
                };
                self.machine.sync(SyncKind::Flush, p, target, None)?;
            }
            Op::Gsync => match self.machine.sync(SyncKind::Gsync, p, Target::All, None)? {
                SyncOutcome::GsyncWaiting => {
                    self.states[p.index()] = ExecState::GsyncWait;
                    advance = false;
                }
                SyncOutcome::GsyncCompleted { .. } => {}
                other => {
                    return Err(ScenarioError::Validation(format!(
                        "unexpected gsync outcome {other:?}"
                    )))
                }
            },
            Op::Lock { trg } => {
                match self
                    .machine
                    .sync(SyncKind::Lock, p, Target::One(ProcessId(trg)), None)?
                {
                    SyncOutcome::Done(_) => {}
                    SyncOutcome::Blocked => {
                        advance = false;
                        progressed = false;
                    }
                    other => {
                        return Err(ScenarioError::Validation(format!(
                            "unexpected lock outcome {other:?}"
                        )))
                    }
                }
            }
            Op::Unlock { trg } => {
                self.machine
                    .sync(SyncKind::Unlock, p, Target::One(ProcessId(trg)), None)?;
            }
            Op::LocalRead { cell } => {
                self.machine.local_read(p, cell)?;
            }
            Op::LocalWrite { cell, value } => {
                self.machine.local_write(p, cell, value)?;
            }
            Op::Nop => {
                self.machine.noop(p)?;
            }
        }
        if advance {
            self.pcs[p.index()] += 1;
            if self.pcs[p.index()] == self.programs[p.index()].len() {
                self.states[p.index()] = ExecState::Finished;
            }
        }
        Ok(progressed)
    }

    /// Housekeeping after every step: completed gsync rounds (and the
    /// checkpoints they may trigger), due faults, and log budgets.
    fn post_step(&mut self) -> Result<(), ScenarioError> {
        while self.machine.completed_gsync_rounds() > self.known_rounds {
            self.known_rounds += 1;
            for i in 0..self.states.len() {
                if self.states[i] == ExecState::GsyncWait {
                    self.pcs[i] += 1;
                    self.states[i] = if self.pcs[i] == self.programs[i].len() {
                        ExecState::Finished
                    } else {
                        ExecState::Ready
                    };
                }
            }
            if self.scenario.scheme() == RecoveryScheme::Gsync && self.cc_due() {
                let tags: Vec<u64> = self.pcs.iter().map(|&pc| pc as u64).collect();
                self.machine
                    .coordinated_checkpoint_gsync(self.scenario.protocol.gsync_ckpt_barrier, &tags)?;
                self.report.coordinated_checkpoints += 1;
            }
        }
        self.check_faults()?;
        if self.run_over {
            return Ok(());
        }
        if self.scenario.scheme() == RecoveryScheme::Locks {
            self.drive_locks_checkpoint()?;
        }
        self.check_log_budget()?;
        // Checkpoint machinery itself consumes events; a fault indexed
        // into that stretch must still fire.
        self.check_faults()?;
        Ok(())
    }

    fn check_faults(&mut self) -> Result<(), ScenarioError> {
        while let Some(&f) = self.faults.front() {
            if self.machine.event_count() > f.event_index && !self.run_over {
                self.faults.pop_front();
                self.fire_fault(f)?;
            } else {
                break;
            }
        }
        Ok(())
    }

    /// Phased Locks-scheme checkpointing: each process flushes and
    /// enters the barrier at its own LC = 0 point; the captures run
    /// once everyone arrived.
    fn drive_locks_checkpoint(&mut self) -> Result<(), ScenarioError> {
        if !self.locks_cc_pending {
            if !self.cc_due() {
                return Ok(());
            }
            self.locks_cc_pending = true;
            self.cc_ready.iter_mut().for_each(|r| *r = false);
        }
        // Processes that already finished their program join passively.
        for i in 0..self.scenario.n_procs as usize {
            let p = ProcessId(i as u32);
            if !self.cc_ready[i]
                && self.states[i] == ExecState::Finished
                && !self.machine.is_crashed(p)
                && self.machine.lc(p) == 0
                && self.resume_locks[i].is_empty()
            {
                self.machine.sync(SyncKind::Flush, p, Target::All, None)?;
                self.cc_ready[i] = true;
            }
        }
        let all_ready = (0..self.scenario.n_procs as usize).all(|i| self.cc_ready[i]);
        if all_ready {
            let tags: Vec<u64> = self.pcs.iter().map(|&pc| pc as u64).collect();
            self.machine.locks_cc_finish(&tags)?;
            self.report.coordinated_checkpoints += 1;
            self.locks_cc_pending = false;
            for i in 0..self.states.len() {
                if self.states[i] == ExecState::CcBarrier {
                    self.states[i] = if self.pcs[i] >= self.programs[i].len() {
                        ExecState::Finished
                    } else {
                        ExecState::Ready
                    };
                }
            }
        }
        Ok(())
    }

    fn cc_due(&self) -> bool {
        if let Some(daly) = &self.scenario.protocol.daly {
            self.machine
                .daly_checkpoint_due(daly.mtbf_seconds, daly.seconds_per_event)
        } else if let Some(k) = self.scenario.protocol.cc_interval_events {
            self.machine.event_count()
                >= self.machine.checkpoint_store().last_cc_end_event() + k
        } else {
            // Without gating every opportunity checkpoints.
            true
        }
    }

    fn check_log_budget(&mut self) -> Result<(), ScenarioError> {
        let Some(budget) = self.scenario.protocol.log_budget else {
            return Ok(());
        };
        let n_total = self.machine.n_procs();
        for p in 0..n_total {
            let p = ProcessId(p);
            if self.machine.is_crashed(p) || self.machine.stored_log_entries(p) <= budget {
                continue;
            }
            let Some(victim) = self.machine.largest_logged_peer(p) else {
                continue;
            };
            if self.machine.is_crashed(victim) {
                continue;
            }
            let tag = self.pcs[victim.index()] as u64;
            match self.machine.demand_checkpoint(p, victim, tag)? {
                DemandOutcome::Done(conf) => {
                    self.report.demand_checkpoints += 1;
                    self.report.trimmed_entries +=
                        self.machine.trim_logs(p, victim, &conf) as u64;
                }
                DemandOutcome::Deferred { .. } => {}
            }
        }
        Ok(())
    }

    fn fire_fault(&mut self, f: FaultSpec) -> Result<(), ScenarioError> {
        let victim = ProcessId(f.victim);
        if self.machine.is_crashed(victim) {
            return Err(ScenarioError::Validation(format!(
                "fault plan crashes {victim} twice before recovery"
            )));
        }
        if !self.corruptions_applied {
            self.corruptions_applied = true;
            for c in &self.scenario.corruptions.clone() {
                match *c {
                    Corruption::DuplicateLogEntry {
                        owner,
                        peer,
                        kind,
                        index,
                    } => {
                        self.machine.corrupt_duplicate_log_entry(
                            ProcessId(owner),
                            ProcessId(peer),
                            kind,
                            index,
                        );
                    }
                }
            }
        }
        let victim_targeted = (0..self.machine.n_procs())
            .map(ProcessId)
            .any(|q| q != victim && self.machine.m_flag(q, victim));
        let ckpt_tag = self
            .machine
            .group_of(victim)
            .and_then(|g| g.member_meta(victim))
            .map(|m| m.resume_tag)
            .unwrap_or(0);
        let crash_pc = self.pcs[victim.index()];
        let was_waiting = self.states[victim.index()] == ExecState::GsyncWait;
        let ctx = self.machine.crash(victim)?;
        self.report.recoveries += 1;

        let outcome = match self.scenario.scheme() {
            RecoveryScheme::Gsync => recover_gsync(&mut self.machine, victim),
            RecoveryScheme::Locks => recover_locks(&mut self.machine, victim),
        };
        match outcome {
            Ok(RecoveryOutcome::Replayed(plan)) => {
                // Deterministic local replay: re-apply the victim's own
                // window writes between its checkpoint and the crash,
                // then resume execution exactly where it stopped, with
                // the in-flight accesses re-buffered and held locks
                // re-acquired.
                for op in &self.programs[victim.index()][ckpt_tag as usize..crash_pc] {
                    if let Op::LocalWrite { cell, value } = *op {
                        self.machine.apply_restored_write(victim, cell, value);
                    }
                }
                // Crash-time counters, except the lock count: the
                // crash released every lock and re-acquisition below
                // re-counts them.
                let mut counters = ctx.counters.clone();
                counters.lc = 0;
                self.machine.set_counters(victim, &counters);
                self.machine.reinstate_pending(victim, &ctx.pending);
                self.cc_ready[victim.index()] = false;
                for key in ctx.held_locks {
                    if !self.resume_locks[victim.index()].contains(&key) {
                        self.resume_locks[victim.index()].push_back(key);
                    }
                }
                self.pcs[victim.index()] = crash_pc;
                self.states[victim.index()] =
                    if crash_pc == self.programs[victim.index()].len()
                        && self.resume_locks[victim.index()].is_empty()
                    {
                        ExecState::Finished
                    } else {
                        ExecState::Ready
                    };
                let _ = was_waiting; // the gsync op simply re-runs
                self.report.replayed_puts += plan
                    .replay_trace
                    .iter()
                    .filter(|d| d.kind == AccessKind::Put)
                    .count() as u64;
                self.report.replayed_gets += plan
                    .replay_trace
                    .iter()
                    .filter(|d| d.kind == AccessKind::Get)
                    .count() as u64;
                self.report
                    .assertion_failures
                    .extend(plan.violations.iter().cloned());
                self.report.fault_outcomes.push(FaultOutcome {
                    victim: f.victim,
                    event_index: f.event_index,
                    fell_back: false,
                    fallback_reason: None,
                    fetched_puts: plan.fetched_puts,
                    fetched_gets: plan.fetched_gets,
                    victim_targeted_by_combining: victim_targeted,
                    replay_trace: plan.replay_trace,
                });
            }
            Ok(RecoveryOutcome::FellBack(plan)) => {
                self.report.fallbacks += 1;
                self.locks_cc_pending = false;
                self.cc_ready.iter_mut().for_each(|r| *r = false);
                // Everyone restarts from the coordinated cut.
                let set = self
                    .machine
                    .checkpoint_store()
                    .coordinated_set()
                    .expect("fallback restored from a coordinated set")
                    .clone();
                for i in 0..self.programs.len() {
                    let tag = set
                        .get(&(i as u32))
                        .map(|c| c.meta.resume_tag as usize)
                        .unwrap_or(0);
                    self.pcs[i] = tag;
                    self.resume_locks[i].clear();
                    self.states[i] = if self.pcs[i] >= self.programs[i].len() {
                        ExecState::Finished
                    } else {
                        ExecState::Ready
                    };
                }
                self.report
                    .assertion_failures
                    .extend(plan.violations.iter().cloned());
                self.report.fault_outcomes.push(FaultOutcome {
                    victim: f.victim,
                    event_index: f.event_index,
                    fell_back: true,
                    fallback_reason: plan.fallback_reason,
                    fetched_puts: plan.fetched_puts,
                    fetched_gets: plan.fetched_gets,
                    victim_targeted_by_combining: victim_targeted,
                    replay_trace: plan.replay_trace,
                });
            }
            Err(RecoveryError::Catastrophic(reason)) => {
                self.report.cf = true;
                self.report.cf_reason = Some(reason);
                self.run_over = true;
            }
            Err(e) => {
                return Err(ScenarioError::Validation(format!(
                    "recovery failed: {e}"
                )))
            }
        }
        Ok(())
    }

    fn finalize(mut self) -> Result<(Report, Machine), ScenarioError> {
        self.report.event_count = self.machine.event_count();
        self.report.final_memory_digest = memory_digest(&self.machine);
        if !self.machine.order().assert_acyclic() {
            self.report
                .assertion_failures
                .push("order graph has a backward so edge".into());
        }
        if !self.report.cf {
            for p in self.machine.live_procs().collect::<Vec<_>>() {
                if self.machine.lc(p) != 0 {
                    self.report
                        .assertion_failures
                        .push(format!("{p} still holds {} lock(s) at end", self.machine.lc(p)));
                }
            }
            if matches!(self.scenario.workload, WorkloadSpec::RandomGsync { .. }) {
                let gncs: Vec<u64> = (0..self.scenario.n_procs)
                    .map(|p| self.machine.gnc(ProcessId(p)))
                    .collect();
                if gncs.windows(2).any(|w| w[0] != w[1]) {
                    self.report
                        .assertion_failures
                        .push(format!("gsync counters diverged at end: {gncs:?}"));
                }
            }
        }
        if let Some(violation) = access_determinism_violation(&self.machine) {
            self.report.access_deterministic = false;
            if self.scenario.protocol.access_deterministic
                && self.report.fault_outcomes.iter().any(|f| !f.fell_back)
            {
                self.report.assertion_failures.push(format!(
                    "scenario declared access-deterministic but the trace is not: {violation}"
                ));
            }
        }
        Ok((self.report, self.machine))
    }
}

/// SHA-256 over every process's committed window, little-endian words.
pub fn memory_digest(machine: &Machine) -> String {
    let mut hasher = Sha256::new();
    for p in 0..machine.n_procs() {
        for w in machine.memory(ProcessId(p)) {
            hasher.update(w.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Scans the trace for co-parallel writes whose outcome depends on the
/// commit order: a local write racing any remote put on the same cell,
/// replacing puts from two sources, or two same-epoch replacing puts
/// from one source. Pure combining traffic commutes and is fine.
pub fn access_determinism_violation(machine: &Machine) -> Option<String> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut puts: BTreeMap<(u32, usize), Vec<(u32, u64, bool)>> = BTreeMap::new();
    for ev in machine.order().events() {
        if let EventKind::Issue { action } = ev.kind {
            let a = machine.action(action);
            if a.kind == AccessKind::Put {
                puts.entry((a.trg.0, a.data.cell())).or_default().push((
                    a.src.0,
                    a.stamp.ec,
                    a.combine,
                ));
            }
        }
    }
    let mut local_writes: BTreeSet<(u32, usize)> = BTreeSet::new();
    for ev in machine.order().events() {
        if let EventKind::LocalWrite { cell, .. } = ev.kind {
            local_writes.insert((ev.proc.0, cell));
        }
    }
    for ((trg, cell), writes) in &puts {
        if local_writes.contains(&(*trg, *cell)) {
            return Some(format!(
                "cell {cell} of p{trg} is both locally written and remotely put"
            ));
        }
        let srcs: BTreeSet<u32> = writes.iter().map(|(s, _, _)| *s).collect();
        let any_replacing = writes.iter().any(|(_, _, c)| !*c);
        if srcs.len() >= 2 && any_replacing {
            return Some(format!(
                "cell {cell} of p{trg} takes replacing puts from {} sources",
                srcs.len()
            ));
        }
        let mut by_src_epoch: BTreeMap<(u32, u64), (usize, bool)> = BTreeMap::new();
        for (s, ec, c) in writes {
            let e = by_src_epoch.entry((*s, *ec)).or_insert((0, false));
            e.0 += 1;
            e.1 |= !*c;
        }
        if let Some(((s, ec), _)) = by_src_epoch
            .iter()
            .find(|(_, (count, replacing))| *count >= 2 && *replacing)
        {
            return Some(format!(
                "p{s} issued multiple same-epoch replacing puts to cell {cell} of p{trg} (epoch {ec})"
            ));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gsync_scenario(seed: u64) -> Scenario {
        Scenario {
            n_procs: 6,
            window_size: 48,
            workload: WorkloadSpec::RandomGsync {
                rounds: 4,
                puts_per_round: 3,
                gets_per_round: 2,
                epochs_per_round: 2,
                combining: false,
                local_ops: true,
            },
            protocol: ProtocolConfig {
                groups: 2,
                log_budget: Some(64),
                ..ProtocolConfig::default()
            },
            faults: Vec::new(),
            corruptions: Vec::new(),
            seed,
        }
    }

    #[test]
    fn identical_scenarios_give_identical_reports() {
        let s = gsync_scenario(42);
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn different_seeds_change_the_digest() {
        let a = run_scenario(&gsync_scenario(1)).unwrap();
        let b = run_scenario(&gsync_scenario(2)).unwrap();
        assert_ne!(a.final_memory_digest, b.final_memory_digest);
    }

    #[test]
    fn zero_faults_match_the_reference_run() {
        let s = gsync_scenario(7);
        let run = run_scenario(&s).unwrap();
        let reference = reference_run(&s).unwrap();
        assert_eq!(run.final_memory_digest, reference.final_memory_digest);
        assert!(run.assertion_failures.is_empty(), "{:?}", run.assertion_failures);
        assert!(run.access_deterministic);
    }

    #[test]
    fn one_fault_recovers_to_the_reference_digest() {
        let mut s = gsync_scenario(11);
        let reference = reference_run(&s).unwrap();
        s.faults = vec![FaultSpec {
            victim: 2,
            event_index: reference.event_count / 2,
        }];
        let run = run_scenario(&s).unwrap();
        assert_eq!(run.recoveries, 1);
        assert!(run.assertion_failures.is_empty(), "{:?}", run.assertion_failures);
        assert_eq!(
            run.final_memory_digest, reference.final_memory_digest,
            "fault outcomes: {:?}",
            run.fault_outcomes
        );
    }

    #[test]
    fn lock_workload_fault_recovers_to_the_reference_digest() {
        let mut s = Scenario {
            n_procs: 5,
            window_size: 40,
            workload: WorkloadSpec::LockPut {
                critical_sections: 5,
                puts_per_cs: 2,
                local_ops: true,
            },
            protocol: ProtocolConfig {
                groups: 1,
                cc_interval_events: Some(40),
                ..ProtocolConfig::default()
            },
            faults: Vec::new(),
            corruptions: Vec::new(),
            seed: 5,
        };
        let reference = reference_run(&s).unwrap();
        s.faults = vec![FaultSpec {
            victim: 1,
            event_index: reference.event_count / 3,
        }];
        let run = run_scenario(&s).unwrap();
        assert!(run.assertion_failures.is_empty(), "{:?}", run.assertion_failures);
        assert_eq!(run.final_memory_digest, reference.final_memory_digest);
    }

    #[test]
    fn combining_workload_falls_back_on_a_crash() {
        let mut s = gsync_scenario(13);
        s.workload = WorkloadSpec::RandomGsync {
            rounds: 4,
            puts_per_round: 2,
            gets_per_round: 1,
            epochs_per_round: 1,
            combining: true,
            local_ops: false,
        };
        let reference = reference_run(&s).unwrap();
        s.faults = vec![FaultSpec {
            victim: 3,
            event_index: reference.event_count / 2,
        }];
        let run = run_scenario(&s).unwrap();
        assert!(run.assertion_failures.is_empty(), "{:?}", run.assertion_failures);
        let outcome = &run.fault_outcomes[0];
        assert!(
            !outcome.victim_targeted_by_combining || outcome.fell_back,
            "an untrimmed combining put against the victim must fall back"
        );
        assert_eq!(run.final_memory_digest, reference.final_memory_digest);
    }

    #[test]
    fn kvstore_logging_counts_match_the_collision_pattern() {
        let s = Scenario {
            n_procs: 4,
            window_size: 128,
            workload: WorkloadSpec::Kvstore {
                inserts: 60,
                key_range: 512,
                slots: 8,
                mean_wait_events: 0.5,
            },
            protocol: ProtocolConfig {
                groups: 1,
                access_deterministic: false,
                ..ProtocolConfig::default()
            },
            faults: Vec::new(),
            corruptions: Vec::new(),
            seed: 99,
        };
        let run = run_scenario(&s).unwrap();
        let meta = &run.workload_meta;
        assert!(meta.collisions > 0, "needs collisions to be interesting");
        let clean = (meta.inserts - meta.collisions) as u64;
        let hits = meta.collisions as u64;
        // 1 put + 1 get per clean insert, 6 puts + 4 gets per collision.
        assert_eq!(run.replayed_puts, 0);
        assert_eq!(logged_puts(&s), clean + 6 * hits);
        assert_eq!(logged_gets(&s), clean + 4 * hits);
    }

    fn logged_puts(s: &Scenario) -> u64 {
        count_logs(s).0
    }

    fn logged_gets(s: &Scenario) -> u64 {
        count_logs(s).1
    }

    /// Re-runs the scenario and counts log entries directly.
    fn count_logs(s: &Scenario) -> (u64, u64) {
        let engine = Engine::new(s.clone()).unwrap();
        let mut engine = engine;
        while !engine.all_finished() && !engine.run_over {
            let mut progressed = false;
            for p in 0..engine.scenario.n_procs {
                if engine.step(ProcessId(p)).unwrap() {
                    progressed = true;
                }
                engine.post_step().unwrap();
            }
            assert!(progressed || engine.all_finished());
        }
        let m = &engine.machine;
        let n = m.n_procs();
        let mut puts = 0;
        let mut gets = 0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    puts += m.put_log(ProcessId(a), ProcessId(b)).len() as u64;
                    gets += m.get_log(ProcessId(a), ProcessId(b)).len() as u64;
                }
            }
        }
        (puts, gets)
    }

    #[test]
    fn fault_beyond_the_trace_is_reported() {
        let mut s = gsync_scenario(3);
        s.faults = vec![FaultSpec {
            victim: 0,
            event_index: u64::MAX / 2,
        }];
        assert!(matches!(
            run_scenario(&s),
            Err(ScenarioError::FaultBeyondTrace { .. })
        ));
    }

    #[test]
    fn corrupted_log_fails_the_replay_assertions() {
        let mut s = gsync_scenario(17);
        let reference = reference_run(&s).unwrap();
        s.faults = vec![FaultSpec {
            victim: 1,
            event_index: reference.event_count * 3 / 4,
        }];
        s.corruptions = vec![Corruption::DuplicateLogEntry {
            owner: 0,
            peer: 1,
            kind: AccessKind::Put,
            index: 0,
        }];
        let run = run_scenario(&s).unwrap();
        assert!(
            !run.assertion_failures.is_empty(),
            "the duplicated entry must trip the exactly-once check"
        );
    }

    #[test]
    fn access_determinism_checker_flags_conflicting_writes() {
        use crate::machine::{Machine, MachineConfig};
        let mut m = Machine::new(MachineConfig {
            n_procs: 3,
            window_size: 8,
            ..MachineConfig::default()
        });
        m.issue_put(ProcessId(0), ProcessId(2), 1, 1, false, false).unwrap();
        m.issue_put(ProcessId(1), ProcessId(2), 1, 2, false, false).unwrap();
        assert!(access_determinism_violation(&m).is_some());
        let mut m2 = Machine::new(MachineConfig {
            n_procs: 3,
            window_size: 8,
            ..MachineConfig::default()
        });
        m2.issue_put(ProcessId(0), ProcessId(2), 1, 1, true, false).unwrap();
        m2.issue_put(ProcessId(1), ProcessId(2), 1, 2, true, false).unwrap();
        assert!(
            access_determinism_violation(&m2).is_none(),
            "combining puts commute"
        );
    }

    #[test]
    fn scenario_json_round_trips() {
        let s = gsync_scenario(1);
        let j = s.to_json();
        let back = Scenario::from_json(&j).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn daly_gated_checkpointing_skips_most_gsyncs() {
        let mut s = gsync_scenario(23);
        s.workload = WorkloadSpec::RandomGsync {
            rounds: 8,
            puts_per_round: 2,
            gets_per_round: 1,
            epochs_per_round: 1,
            combining: false,
            local_ops: false,
        };
        s.protocol.daly = Some(DalyConfig {
            mtbf_seconds: 1e9,
            seconds_per_event: 0.001,
        });
        let run = run_scenario(&s).unwrap();
        assert_eq!(
            run.coordinated_checkpoints, 1,
            "interval never elapses, only the bootstrap set exists"
        );
        let mut every = gsync_scenario(23);
        every.workload = s.workload.clone();
        let run2 = run_scenario(&every).unwrap();
        assert!(run2.coordinated_checkpoints > 1);
    }
}
