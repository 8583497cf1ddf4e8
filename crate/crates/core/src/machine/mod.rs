//! A deterministic, simulated RMA abstract machine.
//!
//! Processes expose a window of machine words. Puts and gets issued at
//! a target are buffered until the issuing process closes the epoch of
//! that (source, target) pair with a flush, an unlock, or a gsync;
//! only then do their memory effects commit. The machine stamps every
//! action with the epoch, get, synchronization and gsync counters the
//! recovery protocol needs, logs accesses transparently, and records
//! every event in an [`OrderGraph`] for order queries and consistency
//! checking.
//!
//! A machine is a single-threaded simulation instance. Lock and gsync
//! operations that cannot complete return a blocked outcome and are
//! retried by the driver; nothing ever blocks a host thread.

pub mod action;
pub mod order;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointStore};
use crate::error::MachineError;
use crate::logging::LogState;
use action::{
    AccessData, AccessKind, Action, CounterStamp, ProcessId, StructureId, SyncAction, SyncKind,
    Target, Word,
};
use order::{ActionId, EventId, EventKind, LockKey, OrderGraph};

/// Static configuration of one simulated machine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MachineConfig {
    pub n_procs: u32,
    /// Window length in words; identical at every process.
    pub window_size: usize,
    /// Whether a completed gsync round introduces additional hb order.
    pub gsync_adds_hb: bool,
    /// When false, the combining-put flag M is set on every logged put.
    pub access_deterministic: bool,
    /// When true, put logging is postponed to the next gsync; models
    /// optimistic logging and its orphan hazard.
    pub optimistic_delay: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            n_procs: 2,
            window_size: 16,
            gsync_adds_hb: true,
            access_deterministic: true,
            optimistic_delay: false,
        }
    }
}

/// Outcome of a synchronization call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Done(EventId),
    /// Lock held elsewhere; the caller should retry later.
    Blocked,
    /// Gsync arrival registered; other processes still missing.
    GsyncWaiting,
    /// This arrival completed the round for every participant.
    GsyncCompleted { round: u64 },
}

/// Counter snapshot of one process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CounterState {
    /// E(self -> q) for every q.
    pub epoch_row: Vec<u64>,
    pub gc: u64,
    pub gnc: u64,
    pub lc: u64,
    /// Synchronization counter stored at this process.
    pub sc_at: u64,
    /// Synchronization counter value last observed by this process.
    pub cur_sc: u64,
}

/// Execution context salvaged by the simulated batch system when a
/// process fails: the crash-time counters, the in-flight (uncommitted)
/// accesses, and the locks the process held. The window memory and all
/// log structures are lost; only checkpoint plus remote logs can
/// restore those.
#[derive(Debug, Clone)]
pub struct ResumeContext {
    pub counters: CounterState,
    pub pending: Vec<ActionId>,
    pub held_locks: Vec<LockKey>,
}

#[derive(Debug, Clone, Default)]
struct LockCell {
    holder: Option<ProcessId>,
    queue: VecDeque<ProcessId>,
    last_release: Option<EventId>,
}

#[derive(Debug, Clone)]
pub(crate) struct ProcessState {
    pub(crate) mem: Vec<Word>,
    pub(crate) crashed: bool,
    pub(crate) epoch: Vec<u64>,
    pub(crate) gc: u64,
    pub(crate) gnc: u64,
    pub(crate) lc: u64,
    pub(crate) sc_at: u64,
    pub(crate) cur_sc: u64,
    /// Issued, uncommitted accesses in issue order (all targets).
    pub(crate) pending: Vec<ActionId>,
    pub(crate) logs: LogState,
    pub(crate) latest_ckpt: Option<Checkpoint>,
    pub(crate) ckpt_seq: u64,
}

impl ProcessState {
    fn new(n: usize, window: usize) -> Self {
        Self {
            mem: vec![0; window],
            crashed: false,
            epoch: vec![0; n],
            gc: 0,
            gnc: 0,
            lc: 0,
            sc_at: 0,
            cur_sc: 0,
            pending: Vec::new(),
            logs: LogState::default(),
            latest_ckpt: None,
            ckpt_seq: 0,
        }
    }

    pub(crate) fn counters(&self) -> CounterState {
        CounterState {
            epoch_row: self.epoch.clone(),
            gc: self.gc,
            gnc: self.gnc,
            lc: self.lc,
            sc_at: self.sc_at,
            cur_sc: self.cur_sc,
        }
    }

    pub(crate) fn set_counters(&mut self, c: &CounterState) {
        self.epoch = c.epoch_row.clone();
        self.gc = c.gc;
        self.gnc = c.gnc;
        self.lc = c.lc;
        self.sc_at = c.sc_at;
        self.cur_sc = c.cur_sc;
    }
}

/// One simulated RMA system instance.
#[derive(Debug)]
pub struct Machine {
    pub(crate) cfg: MachineConfig,
    pub(crate) procs: Vec<ProcessState>,
    pub(crate) actions: Vec<Action>,
    pub(crate) graph: OrderGraph,
    locks: BTreeMap<LockKey, LockCell>,
    /// Processes participating in application collectives; checksum
    /// processes are excluded by the driver.
    collective: BTreeSet<u32>,
    gsync_waiting: BTreeSet<u32>,
    completed_gsync_rounds: u64,
    barrier_rounds: u64,
    at_gsync_point: bool,
    pub(crate) store: CheckpointStore,
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Self {
        assert!(cfg.window_size > 0, "window must hold at least one word");
        assert!(cfg.n_procs > 0, "need at least one process");
        let n = cfg.n_procs as usize;
        let w = cfg.window_size;
        Machine {
            cfg,
            procs: (0..n).map(|_| ProcessState::new(n, w)).collect(),
            actions: Vec::new(),
            graph: OrderGraph::new(),
            locks: BTreeMap::new(),
            collective: (0..n as u32).collect(),
            gsync_waiting: BTreeSet::new(),
            completed_gsync_rounds: 0,
            barrier_rounds: 0,
            at_gsync_point: false,
            store: CheckpointStore::default(),
        }
    }

    /// Restricts application collectives (gsync) to these processes.
    pub fn set_collective(&mut self, procs: impl IntoIterator<Item = ProcessId>) {
        self.collective = procs.into_iter().map(|p| p.0).collect();
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn n_procs(&self) -> u32 {
        self.cfg.n_procs
    }

    pub fn order(&self) -> &OrderGraph {
        &self.graph
    }

    pub fn event_count(&self) -> u64 {
        self.graph.len() as u64
    }

    pub fn action(&self, id: ActionId) -> &Action {
        &self.actions[id.0]
    }

    pub fn memory(&self, p: ProcessId) -> &[Word] {
        &self.procs[p.index()].mem
    }

    pub fn is_crashed(&self, p: ProcessId) -> bool {
        self.procs[p.index()].crashed
    }

    pub fn live_procs(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.procs
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.crashed)
            .map(|(i, _)| ProcessId(i as u32))
    }

    pub fn epoch(&self, p: ProcessId, q: ProcessId) -> u64 {
        self.procs[p.index()].epoch[q.index()]
    }

    pub fn gc(&self, p: ProcessId) -> u64 {
        self.procs[p.index()].gc
    }

    pub fn gnc(&self, p: ProcessId) -> u64 {
        self.procs[p.index()].gnc
    }

    pub fn lc(&self, p: ProcessId) -> u64 {
        self.procs[p.index()].lc
    }

    pub fn sc_at(&self, p: ProcessId) -> u64 {
        self.procs[p.index()].sc_at
    }

    pub fn cur_sc(&self, p: ProcessId) -> u64 {
        self.procs[p.index()].cur_sc
    }

    pub fn counters(&self, p: ProcessId) -> CounterState {
        self.procs[p.index()].counters()
    }

    pub(crate) fn set_counters(&mut self, p: ProcessId, c: &CounterState) {
        self.procs[p.index()].set_counters(c);
    }

    pub fn completed_gsync_rounds(&self) -> u64 {
        self.completed_gsync_rounds
    }

    pub(crate) fn gsync_waiting_contains(&self, p: ProcessId) -> bool {
        self.gsync_waiting.contains(&p.0)
    }

    /// Clears lock and collective state after a global rollback.
    pub(crate) fn reset_sync_state(&mut self) {
        self.locks.clear();
        self.gsync_waiting.clear();
        self.at_gsync_point = false;
    }

    pub fn at_gsync_point(&self) -> bool {
        self.at_gsync_point
    }

    /// Uncommitted accesses a process has in flight, in issue order.
    pub fn pending_accesses(&self, p: ProcessId) -> Vec<ActionId> {
        self.procs[p.index()].pending.clone()
    }

    pub fn has_open_epochs(&self, p: ProcessId) -> bool {
        !self.procs[p.index()].pending.is_empty()
    }

    fn check_proc(&self, p: ProcessId) -> Result<(), MachineError> {
        if p.index() >= self.procs.len() {
            return Err(MachineError::UnknownProcess(p));
        }
        if self.procs[p.index()].crashed {
            return Err(MachineError::CrashedProcess(p));
        }
        Ok(())
    }

    fn check_cell(&self, cell: usize) -> Result<(), MachineError> {
        if cell >= self.cfg.window_size {
            return Err(MachineError::OutOfBounds {
                cell,
                len: self.cfg.window_size,
            });
        }
        Ok(())
    }

    fn stamp(&self, src: ProcessId, trg: ProcessId) -> CounterStamp {
        let s = &self.procs[src.index()];
        CounterStamp {
            ec: s.epoch[trg.index()],
            gc: s.gc,
            sc: s.cur_sc,
            gnc: s.gnc,
        }
    }

    // ------------------------------------------------------------------
    // Communication actions
    // ------------------------------------------------------------------

    /// Issues a put. The write is buffered: the target's memory is not
    /// modified until the (src, trg) epoch closes. A combining put
    /// accumulates into the target cell by addition at commit time; a
    /// replacing put overwrites it.
    pub fn issue_put(
        &mut self,
        src: ProcessId,
        trg: ProcessId,
        cell: usize,
        value: Word,
        combine: bool,
        blocking: bool,
    ) -> Result<ActionId, MachineError> {
        self.check_proc(src)?;
        self.check_proc(trg)?;
        self.check_cell(cell)?;
        if src == trg {
            return Err(MachineError::SelfTarget(src));
        }
        self.at_gsync_point = false;
        let id = ActionId(self.actions.len());
        let stamp = self.stamp(src, trg);
        self.actions.push(Action {
            kind: AccessKind::Put,
            src,
            trg,
            combine,
            stamp,
            data: AccessData::Put { cell, value },
        });
        if blocking {
            // Pessimistic rule: a blocking put is logged before issuing.
            self.log_put(id)?;
            self.graph.record_issue(id, src, trg, AccessKind::Put, stamp.ec);
            self.procs[src.index()].pending.push(id);
            self.implicit_flush(src, trg)?;
        } else {
            self.graph.record_issue(id, src, trg, AccessKind::Put, stamp.ec);
            self.procs[src.index()].pending.push(id);
            self.log_put(id)?;
        }
        Ok(id)
    }

    /// Issues a get. The read value becomes defined only when the epoch
    /// closes; until then the action's data carries no value.
    pub fn issue_get(
        &mut self,
        src: ProcessId,
        trg: ProcessId,
        cell: usize,
        blocking: bool,
    ) -> Result<ActionId, MachineError> {
        self.check_proc(src)?;
        self.check_proc(trg)?;
        self.check_cell(cell)?;
        if src == trg {
            return Err(MachineError::SelfTarget(src));
        }
        self.at_gsync_point = false;
        let id = ActionId(self.actions.len());
        let stamp = self.stamp(src, trg);
        self.actions.push(Action {
            kind: AccessKind::Get,
            src,
            trg,
            combine: false,
            stamp,
            data: AccessData::Get { cell, value: None },
        });
        // Phase 1 of get logging: raise N at the target, then issue and
        // queue the determinant.
        self.log_get_phase1(id);
        self.graph.record_issue(id, src, trg, AccessKind::Get, stamp.ec);
        self.procs[src.index()].pending.push(id);
        if blocking {
            self.implicit_flush(src, trg)?;
        }
        Ok(id)
    }

    /// A fetch-and-add style atomic: reads the old value and adds into
    /// the cell in one blocking step. Categorized as both a put and a
    /// get, so it produces one entry in each log family.
    pub fn issue_atomic(
        &mut self,
        src: ProcessId,
        trg: ProcessId,
        cell: usize,
        add: Word,
    ) -> Result<(ActionId, ActionId), MachineError> {
        let get_id = self.issue_get(src, trg, cell, false)?;
        let put_id = self.issue_put(src, trg, cell, add, true, false)?;
        self.implicit_flush(src, trg)?;
        Ok((put_id, get_id))
    }

    fn implicit_flush(&mut self, src: ProcessId, trg: ProcessId) -> Result<(), MachineError> {
        match self.sync(SyncKind::Flush, src, Target::One(trg), None)? {
            SyncOutcome::Done(_) => Ok(()),
            other => Err(MachineError::ProtocolOrder(format!(
                "implicit flush did not complete: {other:?}"
            ))),
        }
    }

    // ------------------------------------------------------------------
    // Local (internal) actions
    // ------------------------------------------------------------------

    /// Reads the process's own committed memory. Never-written cells
    /// read as zero.
    pub fn local_read(&mut self, p: ProcessId, cell: usize) -> Result<Word, MachineError> {
        self.check_proc(p)?;
        self.check_cell(cell)?;
        let value = self.procs[p.index()].mem[cell];
        self.graph.record(p, EventKind::LocalRead { cell, value });
        Ok(value)
    }

    /// Writes the process's own committed memory immediately. If the
    /// cell is also targeted by logged remote puts, replay could not
    /// order the write against them, so the issuers' M flags are raised
    /// (the §4.2-style conservatism).
    pub fn local_write(
        &mut self,
        p: ProcessId,
        cell: usize,
        value: Word,
    ) -> Result<(), MachineError> {
        self.check_proc(p)?;
        self.check_cell(cell)?;
        self.procs[p.index()].mem[cell] = value;
        self.graph.record(p, EventKind::LocalWrite { cell, value });
        self.flag_conflicting_put_logs(p, cell);
        Ok(())
    }

    /// Restores a local write during recovery without recording a new
    /// event and without conservatism: the original write is already in
    /// the history.
    pub(crate) fn apply_restored_write(&mut self, p: ProcessId, cell: usize, value: Word) {
        self.procs[p.index()].mem[cell] = value;
    }

    // ------------------------------------------------------------------
    // Synchronization actions
    // ------------------------------------------------------------------

    /// Performs a synchronization action.
    ///
    /// Flush and unlock close the (src, trg) epoch and commit buffered
    /// accesses; gsync closes every epoch of every live process once
    /// all of them have arrived; lock blocks until the structure is
    /// free and fetch-increments the target's synchronization counter.
    pub fn sync(
        &mut self,
        kind: SyncKind,
        src: ProcessId,
        trg: Target,
        structure: Option<StructureId>,
    ) -> Result<SyncOutcome, MachineError> {
        self.check_proc(src)?;
        match kind {
            SyncKind::Flush => {
                self.at_gsync_point = false;
                let ev = self.record_sync(kind, src, trg, structure);
                match trg {
                    Target::One(q) => {
                        self.check_proc(q)?;
                        self.close_epoch(src, q, ev)?;
                    }
                    Target::All => {
                        for q in 0..self.procs.len() {
                            let q = ProcessId(q as u32);
                            if q != src && !self.procs[q.index()].crashed {
                                self.close_epoch(src, q, ev)?;
                            }
                        }
                    }
                }
                self.procs[src.index()].gc += 1;
                Ok(SyncOutcome::Done(ev))
            }
            SyncKind::Lock => {
                let Target::One(q) = trg else {
                    return Err(MachineError::ProtocolOrder(
                        "lock must target a single process".into(),
                    ));
                };
                self.check_proc(q)?;
                self.at_gsync_point = false;
                self.acquire_lock(src, q, structure)
            }
            SyncKind::Unlock => {
                let Target::One(q) = trg else {
                    return Err(MachineError::ProtocolOrder(
                        "unlock must target a single process".into(),
                    ));
                };
                self.at_gsync_point = false;
                self.release_lock(src, q, structure)
            }
            SyncKind::Gsync => {
                if trg != Target::All {
                    return Err(MachineError::GsyncTarget);
                }
                self.gsync_arrive(src)
            }
        }
    }

    fn record_sync(
        &mut self,
        kind: SyncKind,
        src: ProcessId,
        trg: Target,
        structure: Option<StructureId>,
    ) -> EventId {
        let stamp = match trg {
            Target::One(q) => self.stamp(src, q),
            Target::All => {
                let s = &self.procs[src.index()];
                CounterStamp {
                    ec: 0,
                    gc: s.gc,
                    sc: s.cur_sc,
                    gnc: s.gnc,
                }
            }
        };
        self.graph.record(
            src,
            EventKind::Sync {
                sync: SyncAction {
                    kind,
                    src,
                    trg,
                    stamp,
                    structure,
                },
            },
        )
    }

    /// Commits every buffered access of the (p, q) pair in issue order,
    /// runs phase 2 of get logging, and advances E(p -> q).
    fn close_epoch(&mut self, p: ProcessId, q: ProcessId, at: EventId) -> Result<(), MachineError> {
        let batch: Vec<ActionId> = self.procs[p.index()]
            .pending
            .iter()
            .copied()
            .filter(|id| self.actions[id.0].trg == q)
            .collect();
        self.procs[p.index()]
            .pending
            .retain(|id| self.actions[id.0].trg != q);
        let mut had_get = false;
        for id in &batch {
            self.commit_access(*id, at)?;
            if self.actions[id.0].kind == AccessKind::Get {
                had_get = true;
                self.log_get_phase2(*id)?;
            }
        }
        if had_get {
            // Phase 2 done for every get of the epoch.
            self.procs[q.index()].logs.n_flag.insert(p.0, false);
        }
        self.procs[p.index()].epoch[q.index()] += 1;
        Ok(())
    }

    fn commit_access(&mut self, id: ActionId, at: EventId) -> Result<(), MachineError> {
        let (kind, trg, combine) = {
            let a = &self.actions[id.0];
            (a.kind, a.trg, a.combine)
        };
        match kind {
            AccessKind::Put => {
                let AccessData::Put { cell, value } = self.actions[id.0].data else {
                    unreachable!()
                };
                let m = &mut self.procs[trg.index()].mem[cell];
                *m = if combine {
                    m.wrapping_add(value)
                } else {
                    value
                };
            }
            AccessKind::Get => {
                let AccessData::Get { cell, .. } = self.actions[id.0].data else {
                    unreachable!()
                };
                let value = self.procs[trg.index()].mem[cell];
                if let AccessData::Get { value: v, .. } = &mut self.actions[id.0].data {
                    *v = Some(value);
                }
            }
        }
        self.graph.record_commit(id, at);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Locks
    // ------------------------------------------------------------------

    fn acquire_lock(
        &mut self,
        p: ProcessId,
        q: ProcessId,
        structure: Option<StructureId>,
    ) -> Result<SyncOutcome, MachineError> {
        let key = LockKey {
            owner: q,
            structure,
        };
        let cell = self.locks.entry(key).or_default();
        if cell.holder == Some(p) {
            return Err(MachineError::ProtocolOrder(format!(
                "{p} already holds the lock on ({q}, {structure:?})"
            )));
        }
        let front = cell.queue.front().copied();
        if cell.holder.is_some() || (front.is_some() && front != Some(p)) {
            if !cell.queue.contains(&p) {
                cell.queue.push_back(p);
            }
            return Ok(SyncOutcome::Blocked);
        }
        if front == Some(p) {
            cell.queue.pop_front();
        }
        cell.holder = Some(p);
        let last_release = cell.last_release;
        let ev = self.record_sync(SyncKind::Lock, p, Target::One(q), structure);
        if let Some(rel) = last_release {
            self.graph.add_so_edge(rel, ev);
        }
        let user_lock = structure.is_none_or(|s| !s.is_protocol());
        if user_lock {
            self.procs[p.index()].lc += 1;
            // §4.1.C: fetch SC at the target, increment, and adopt the
            // new value for stamping subsequent actions.
            self.procs[q.index()].sc_at += 1;
            let sc = self.procs[q.index()].sc_at;
            self.procs[p.index()].cur_sc = sc;
        }
        Ok(SyncOutcome::Done(ev))
    }

    fn release_lock(
        &mut self,
        p: ProcessId,
        q: ProcessId,
        structure: Option<StructureId>,
    ) -> Result<SyncOutcome, MachineError> {
        let key = LockKey {
            owner: q,
            structure,
        };
        let holds = self
            .locks
            .get(&key)
            .is_some_and(|c| c.holder == Some(p));
        if !holds {
            return Err(MachineError::UnlockWithoutLock {
                p,
                trg: q,
                structure,
            });
        }
        let user_lock = structure.is_none_or(|s| !s.is_protocol());
        let ev = self.record_sync(SyncKind::Unlock, p, Target::One(q), structure);
        if user_lock {
            // Unlock has flush semantics on the pair: it closes the
            // epoch and counts toward the get counter.
            self.close_epoch(p, q, ev)?;
            self.procs[p.index()].gc += 1;
            self.procs[p.index()].lc -= 1;
        }
        let cell = self.locks.get_mut(&key).expect("lock cell exists");
        cell.holder = None;
        cell.last_release = Some(ev);
        Ok(SyncOutcome::Done(ev))
    }

    /// Locks held by a process right now.
    pub fn held_locks(&self, p: ProcessId) -> Vec<LockKey> {
        self.locks
            .iter()
            .filter(|(_, c)| c.holder == Some(p))
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn lock_holder(&self, owner: ProcessId, structure: Option<StructureId>) -> Option<ProcessId> {
        self.locks
            .get(&LockKey { owner, structure })
            .and_then(|c| c.holder)
    }

    /// Whether a process has a pending (blocked) lock request.
    pub fn is_lock_queued(&self, p: ProcessId) -> bool {
        self.locks.values().any(|c| c.queue.contains(&p))
    }

    // ------------------------------------------------------------------
    // Gsync
    // ------------------------------------------------------------------

    fn gsync_arrive(&mut self, p: ProcessId) -> Result<SyncOutcome, MachineError> {
        if !self.collective.contains(&p.0) {
            return Err(MachineError::ProtocolOrder(format!(
                "{p} does not participate in collectives"
            )));
        }
        if self.gsync_waiting.contains(&p.0) {
            return Err(MachineError::ProtocolOrder(format!(
                "{p} called gsync twice in one round"
            )));
        }
        self.gsync_waiting.insert(p.0);
        let round = self.completed_gsync_rounds;
        self.graph.record(p, EventKind::GsyncEnter { round });
        if self.gsync_round_ready() {
            self.complete_gsync_round()?;
            Ok(SyncOutcome::GsyncCompleted { round })
        } else {
            Ok(SyncOutcome::GsyncWaiting)
        }
    }

    fn gsync_round_ready(&self) -> bool {
        self.collective
            .iter()
            .filter(|&&i| !self.procs[i as usize].crashed)
            .all(|i| self.gsync_waiting.contains(i))
    }

    /// Closes all epochs of all participants, bumps every gsync
    /// counter, and optionally introduces the pairwise hb order.
    fn complete_gsync_round(&mut self) -> Result<(), MachineError> {
        let round = self.completed_gsync_rounds;
        let participants: Vec<ProcessId> =
            self.gsync_waiting.iter().map(|&i| ProcessId(i)).collect();
        let mut enters: BTreeMap<u32, EventId> = BTreeMap::new();
        for ev in self.graph.events().iter().rev() {
            if let EventKind::GsyncEnter { round: r } = ev.kind {
                if r == round {
                    enters.entry(ev.proc.0).or_insert(ev.id);
                }
            }
            if enters.len() == participants.len() {
                break;
            }
        }
        let mut leaves: BTreeMap<u32, EventId> = BTreeMap::new();
        for &p in &participants {
            let ev = self.graph.record(p, EventKind::GsyncLeave { round });
            leaves.insert(p.0, ev);
        }
        // Commit every pending access of every participant in global
        // issue order; the order graph still marks same-epoch accesses
        // co-parallel.
        let mut all_pending: Vec<ActionId> = Vec::new();
        for &p in &participants {
            all_pending.extend(self.procs[p.index()].pending.iter().copied());
        }
        all_pending.sort();
        for id in &all_pending {
            let (src, trg, kind) = {
                let a = &self.actions[id.0];
                (a.src, a.trg, a.kind)
            };
            let at = leaves[&src.0];
            self.commit_access(*id, at)?;
            if kind == AccessKind::Get {
                self.log_get_phase2(*id)?;
                self.procs[trg.index()].logs.n_flag.insert(src.0, false);
            }
        }
        for &p in &participants {
            self.procs[p.index()].pending.clear();
            for q in 0..self.procs.len() {
                if q != p.index() {
                    self.procs[p.index()].epoch[q] += 1;
                }
            }
            self.procs[p.index()].gnc += 1;
        }
        if self.cfg.gsync_adds_hb {
            for &p in &participants {
                for &q in &participants {
                    if p != q {
                        self.graph.add_so_edge(enters[&p.0], leaves[&q.0]);
                    }
                }
            }
        }
        // Optimistic logging flushes its staged entries at the gsync.
        for &p in &participants {
            self.flush_staged_puts(p)?;
        }
        self.gsync_waiting.clear();
        self.completed_gsync_rounds += 1;
        self.at_gsync_point = true;
        Ok(())
    }

    /// Runs one barrier over all live processes, adding the pairwise hb
    /// order. Used by the coordinated checkpoint schemes.
    pub(crate) fn barrier(&mut self) -> Result<(), MachineError> {
        let round = self.barrier_rounds;
        self.barrier_rounds += 1;
        let live: Vec<ProcessId> = self.live_procs().collect();
        let mut enters = Vec::with_capacity(live.len());
        for &p in &live {
            enters.push(self.graph.record(p, EventKind::BarrierEnter { round }));
        }
        let mut leaves = Vec::with_capacity(live.len());
        for &p in &live {
            leaves.push(self.graph.record(p, EventKind::BarrierLeave { round }));
        }
        for (i, &e) in enters.iter().enumerate() {
            for (j, &l) in leaves.iter().enumerate() {
                if i != j {
                    self.graph.add_so_edge(e, l);
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Failures
    // ------------------------------------------------------------------

    /// Fail-stop crash. Window memory, logs, flags, and the process's
    /// own checkpoint payload are lost; locks it held are released.
    /// Returns the execution context the batch system salvages for the
    /// replacement process.
    pub fn crash(&mut self, p: ProcessId) -> Result<ResumeContext, MachineError> {
        self.check_proc(p)?;
        let state = &self.procs[p.index()];
        let ctx = ResumeContext {
            counters: state.counters(),
            pending: state.pending.clone(),
            held_locks: self.held_locks(p),
        };
        self.graph.record(p, EventKind::Crash);
        for key in &ctx.held_locks {
            if let Some(cell) = self.locks.get_mut(key) {
                cell.holder = None;
            }
        }
        for cell in self.locks.values_mut() {
            cell.queue.retain(|&w| w != p);
        }
        self.gsync_waiting.remove(&p.0);
        let n = self.procs.len();
        let w = self.cfg.window_size;
        let seq = self.procs[p.index()].ckpt_seq;
        self.procs[p.index()] = ProcessState::new(n, w);
        self.procs[p.index()].crashed = true;
        self.procs[p.index()].ckpt_seq = seq;
        // A round the process was waiting in stays open: peers resume
        // their communication with the replacement once it re-arrives.
        Ok(ctx)
    }

    /// Brings a replacement process online with the given memory image.
    /// The replacement reuses the failed process's id.
    pub(crate) fn revive(&mut self, p: ProcessId, mem: Vec<Word>, counters: &CounterState) {
        let s = &mut self.procs[p.index()];
        debug_assert!(s.crashed);
        s.crashed = false;
        s.mem = mem;
        s.set_counters(counters);
        s.lc = 0;
    }

    /// Re-buffers in-flight accesses salvaged at crash time and re-logs
    /// their put entries, preserving the original stamps. On the causal
    /// path the buffer holds puts only (an open get would have forced
    /// the fallback), but a salvaged get re-runs its phase-1 logging so
    /// the later epoch close finds its queue entry.
    pub(crate) fn reinstate_pending(&mut self, p: ProcessId, pending: &[ActionId]) {
        for &id in pending {
            let a = self.actions[id.0].clone();
            debug_assert_eq!(a.src, p);
            self.procs[p.index()].pending.push(id);
            match a.kind {
                AccessKind::Put => self.relog_put(id),
                AccessKind::Get => self.log_get_phase1(id),
            }
        }
    }

    /// Records an idle event for a process.
    pub fn noop(&mut self, p: ProcessId) -> Result<(), MachineError> {
        self.check_proc(p)?;
        self.graph.record(p, EventKind::Noop);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Introspection
    // ------------------------------------------------------------------

    /// One JSON object per event: the full trace.
    pub fn trace_jsonl(&self) -> String {
        self.graph.dump_jsonl(|id| {
            serde_json::json!({
                "type": "issue",
                "action": self.actions[id.0],
            })
        })
    }
}

#[cfg(test)]
mod tests;
