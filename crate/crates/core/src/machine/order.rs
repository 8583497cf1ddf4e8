//! Event history and the po / so / co / hb / cohb orders over it.
//!
//! The graph records every issue, synchronization, internal and
//! protocol event of one machine. `po` totally orders the events of a
//! single process, `so` links matching synchronization events (lock
//! hand-offs, and collective rounds when they introduce ordering), `hb`
//! is the transitive closure of their union, and `co` orders the
//! visibility of memory effects: accesses of one (src, trg) pair are
//! co-ordered exactly when an epoch boundary separates them.
//!
//! Collective rounds are recorded as enter/leave event pairs so that
//! the cross-process edges (enter of one process to leave of every
//! other) keep `hb` acyclic.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::MachineError;
use crate::machine::action::{
    AccessKind, Determinant, ProcessId, StructureId, SyncAction, Word,
};

/// Index of an event in the history.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EventId(pub usize);

/// Index of an action in the machine's action arena.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ActionId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum EventKind {
    /// An access was issued (its effect is still buffered).
    Issue { action: ActionId },
    /// A flush, lock or unlock completed.
    Sync { sync: SyncAction },
    /// One participant entered a gsync round.
    GsyncEnter { round: u64 },
    /// One participant left a completed gsync round.
    GsyncLeave { round: u64 },
    /// Barrier participation (used by the checkpoint schemes).
    BarrierEnter { round: u64 },
    BarrierLeave { round: u64 },
    LocalRead { cell: usize, value: Word },
    LocalWrite { cell: usize, value: Word },
    /// A checkpoint was captured by this process.
    Checkpoint { seq: u64, coordinated: bool },
    Crash,
    RecoveryStart { failed: ProcessId },
    /// One logged action was replayed into the replacement's memory.
    Replay { determinant: Determinant },
    RecoveryEnd { fell_back: bool },
    /// Global rollback to the last coordinated checkpoint.
    Fallback,
    /// Consumes one event slot without touching any state; models
    /// think time between operations.
    Noop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub id: EventId,
    pub proc: ProcessId,
    pub kind: EventKind,
}

/// Per-access view the order queries need.
#[derive(Debug, Clone, Copy)]
pub struct AccessView {
    pub issue: EventId,
    pub commit: Option<EventId>,
    pub src: ProcessId,
    pub trg: ProcessId,
    pub kind: AccessKind,
    pub ec: u64,
}

/// The five order relations of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderRelation {
    Po,
    So,
    Hb,
    Co,
    Cohb,
}

/// Result of an order query between two events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderResult {
    /// The first event precedes the second.
    OrderedForward,
    /// The second event precedes the first.
    OrderedBackward,
    Parallel,
}

#[derive(Debug, Default, Clone)]
pub struct OrderGraph {
    events: Vec<Event>,
    /// Position of each event within its process's program order.
    po_pos: Vec<usize>,
    po_seq: HashMap<ProcessId, Vec<EventId>>,
    so_out: HashMap<usize, Vec<usize>>,
    /// Access metadata, indexed like the machine's action arena.
    accesses: Vec<AccessView>,
    /// Issue events per (src, trg) pair, in issue order.
    pair_issues: HashMap<(ProcessId, ProcessId), Vec<ActionId>>,
    /// Checkpoint capture events per process, in capture order.
    checkpoints: HashMap<ProcessId, Vec<EventId>>,
}

impl OrderGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn access(&self, id: ActionId) -> Option<&AccessView> {
        self.accesses.get(id.0)
    }

    pub(crate) fn record(&mut self, proc: ProcessId, kind: EventKind) -> EventId {
        let id = EventId(self.events.len());
        let seq = self.po_seq.entry(proc).or_default();
        self.po_pos.push(seq.len());
        seq.push(id);
        if let EventKind::Checkpoint { .. } = kind {
            self.checkpoints.entry(proc).or_default().push(id);
        }
        self.events.push(Event { id, proc, kind });
        id
    }

    pub(crate) fn record_issue(
        &mut self,
        action: ActionId,
        src: ProcessId,
        trg: ProcessId,
        kind: AccessKind,
        ec: u64,
    ) -> EventId {
        let issue = self.record(src, EventKind::Issue { action });
        debug_assert_eq!(action.0, self.accesses.len());
        self.accesses.push(AccessView {
            issue,
            commit: None,
            src,
            trg,
            kind,
            ec,
        });
        self.pair_issues.entry((src, trg)).or_default().push(action);
        issue
    }

    pub(crate) fn record_commit(&mut self, action: ActionId, at: EventId) {
        self.accesses[action.0].commit = Some(at);
    }

    /// so edge between two already-recorded events. Edges always point
    /// forward in recording order, which keeps hb acyclic.
    pub(crate) fn add_so_edge(&mut self, from: EventId, to: EventId) {
        debug_assert!(from.0 < to.0, "so edges must point forward");
        self.so_out.entry(from.0).or_default().push(to.0);
    }

    fn check(&self, e: EventId) -> Result<(), MachineError> {
        if e.0 < self.events.len() {
            Ok(())
        } else {
            Err(MachineError::UnknownEvent(e.0))
        }
    }

    /// Pure query over the recorded history. `hb` and `co` closures are
    /// computed on demand.
    pub fn order_query(
        &self,
        a: EventId,
        b: EventId,
        relation: OrderRelation,
    ) -> Result<OrderResult, MachineError> {
        self.check(a)?;
        self.check(b)?;
        let fwd = self.related(a, b, relation);
        let bwd = self.related(b, a, relation);
        Ok(match (fwd, bwd) {
            (true, _) => OrderResult::OrderedForward,
            (false, true) => OrderResult::OrderedBackward,
            (false, false) => OrderResult::Parallel,
        })
    }

    fn related(&self, a: EventId, b: EventId, relation: OrderRelation) -> bool {
        match relation {
            OrderRelation::Po => self.po_related(a, b),
            OrderRelation::So => self.reach(a, b, false, true),
            OrderRelation::Hb => self.reach(a, b, true, true),
            OrderRelation::Co => self.co_reach(a, b),
            OrderRelation::Cohb => self.co_reach(a, b) && self.reach(a, b, true, true),
        }
    }

    pub fn cohb_related(&self, a: EventId, b: EventId) -> bool {
        self.related(a, b, OrderRelation::Cohb)
    }

    fn po_related(&self, a: EventId, b: EventId) -> bool {
        let (ea, eb) = (&self.events[a.0], &self.events[b.0]);
        ea.proc == eb.proc && self.po_pos[a.0] < self.po_pos[b.0]
    }

    /// Reachability over po edges (optional) and so edges.
    fn reach(&self, from: EventId, to: EventId, use_po: bool, use_so: bool) -> bool {
        if from == to {
            return false;
        }
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        queue.push_back(from.0);
        seen.insert(from.0);
        while let Some(cur) = queue.pop_front() {
            if cur == to.0 {
                return true;
            }
            if use_po {
                let ev = &self.events[cur];
                let seq = &self.po_seq[&ev.proc];
                if let Some(next) = seq.get(self.po_pos[cur] + 1) {
                    if seen.insert(next.0) {
                        queue.push_back(next.0);
                    }
                }
            }
            if use_so {
                if let Some(outs) = self.so_out.get(&cur) {
                    for &n in outs {
                        if seen.insert(n) {
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        false
    }

    /// Consistency-order neighbors of an event:
    /// - an access co-precedes every later-epoch access of its pair;
    /// - a committed put co-precedes every later checkpoint of its target,
    ///   and a committed get every later checkpoint of its source;
    /// - a checkpoint co-precedes every access its owner issues afterwards.
    fn co_neighbors(&self, e: usize, out: &mut Vec<usize>) {
        out.clear();
        let ev = &self.events[e];
        match &ev.kind {
            EventKind::Issue { action } => {
                let view = &self.accesses[action.0];
                if let Some(peers) = self.pair_issues.get(&(view.src, view.trg)) {
                    for &other in peers {
                        let o = &self.accesses[other.0];
                        if o.ec > view.ec {
                            out.push(o.issue.0);
                        }
                    }
                }
                if let Some(commit) = view.commit {
                    let affected = match view.kind {
                        AccessKind::Put => view.trg,
                        AccessKind::Get => view.src,
                    };
                    if let Some(ckpts) = self.checkpoints.get(&affected) {
                        for &c in ckpts {
                            if commit.0 < c.0 {
                                out.push(c.0);
                            }
                        }
                    }
                }
            }
            EventKind::Checkpoint { .. } => {
                for (&(src, _), issues) in &self.pair_issues {
                    if src != ev.proc {
                        continue;
                    }
                    for &a in issues {
                        let view = &self.accesses[a.0];
                        if self.po_related(ev.id, view.issue) {
                            out.push(view.issue.0);
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn co_reach(&self, from: EventId, to: EventId) -> bool {
        if from == to {
            return false;
        }
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        let mut scratch = Vec::new();
        queue.push_back(from.0);
        seen.insert(from.0);
        while let Some(cur) = queue.pop_front() {
            if cur == to.0 {
                return true;
            }
            self.co_neighbors(cur, &mut scratch);
            for &n in &scratch {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        false
    }

    /// All po and so edges point forward in recording order; a cycle is
    /// therefore impossible. This re-verifies the edge invariant.
    pub fn assert_acyclic(&self) -> bool {
        self.so_out
            .iter()
            .all(|(&from, outs)| outs.iter().all(|&to| from < to))
    }

    /// Emits one JSON object per event, in recording order.
    pub fn dump_jsonl(&self, resolve: impl Fn(ActionId) -> serde_json::Value) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let mut v = serde_json::to_value(&ev.kind).expect("event serializes");
            if let EventKind::Issue { action } = &ev.kind {
                v = resolve(*action);
            }
            let line = serde_json::json!({
                "event": ev.id.0,
                "proc": ev.proc.0,
                "kind": v,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Scope of one lock: a structure at a target process (whole window
/// when the structure is absent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LockKey {
    pub owner: ProcessId,
    pub structure: Option<StructureId>,
}
