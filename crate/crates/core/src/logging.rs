//! Transparent logging of puts and gets.
//!
//! Every process keeps, for each peer: the puts it issued there
//! (`LP_p[q]`, surviving the target's crash), the gets others issued at
//! it (`LG_q[p]`, surviving the issuer's crash), a queue `Q_p` of
//! determinants of gets whose epoch is still open, the non-blocking-get
//! flag `N_q[p]`, and the combining-put flag `M_p[q]`. Gets are logged
//! in two phases: the determinant before issuing, the full action with
//! its data once the epoch closes.

use std::collections::BTreeMap;

use crate::checkpoint::CkptConfirmation;
use crate::error::MachineError;
use crate::machine::action::{AccessKind, Action, Determinant, ProcessId, StructureId, SyncKind, Target};
use crate::machine::order::ActionId;
use crate::machine::{Machine, SyncOutcome};

/// Per-process log structures. Logs are kept in issue order; appends
/// have set semantics, so an entry identical to one already present is
/// not duplicated.
#[derive(Debug, Clone, Default)]
pub struct LogState {
    /// LP_self[q]: puts issued by this process, targeted at q.
    pub(crate) put_log: BTreeMap<u32, Vec<ActionId>>,
    /// LG_self[p]: gets targeted at this process, issued by p.
    pub(crate) get_log: BTreeMap<u32, Vec<ActionId>>,
    /// Q_self: determinants of own gets in still-open epochs.
    pub(crate) pending_gets: Vec<Determinant>,
    /// N_self[p]: p has a non-blocking get here whose phase-2 logging
    /// has not completed.
    pub(crate) n_flag: BTreeMap<u32, bool>,
    /// M_self[q]: replaying LP_self[q] could double-apply.
    pub(crate) m_flag: BTreeMap<u32, bool>,
    /// Puts whose logging is postponed (optimistic-delay mode).
    pub(crate) staged_puts: BTreeMap<u32, Vec<ActionId>>,
    /// Entries removed by trimming, kept for auditing.
    pub(crate) trimmed: BTreeMap<u32, Vec<Action>>,
}

impl LogState {
    /// Total entries stored at this process (both log families).
    pub fn stored_entries(&self) -> usize {
        self.put_log.values().map(Vec::len).sum::<usize>()
            + self.get_log.values().map(Vec::len).sum::<usize>()
    }
}

impl Machine {
    /// Logs a put into LP_src[trg] under the source's self-lock.
    /// Must run before the epoch that issued the put closes.
    pub fn log_put(&mut self, id: ActionId) -> Result<(), MachineError> {
        let (src, trg, combine, ec) = {
            let a = &self.actions[id.0];
            (a.src, a.trg, a.combine, a.stamp.ec)
        };
        let a = &self.actions[id.0];
        if a.kind != AccessKind::Put {
            return Err(MachineError::ProtocolOrder(
                "log_put requires a put action".into(),
            ));
        }
        if ec < self.epoch(src, trg) {
            return Err(MachineError::ProtocolOrder(format!(
                "put logged after its epoch closed (EC {ec} < E {})",
                self.epoch(src, trg)
            )));
        }
        if self.cfg.optimistic_delay {
            // Postponed: the entry becomes visible at the next gsync.
            let staged = self.procs[src.index()]
                .logs
                .staged_puts
                .entry(trg.0)
                .or_default();
            if !staged.contains(&id) {
                staged.push(id);
            }
            return Ok(());
        }
        // Self-locking guards LP_src against concurrent recoveries.
        self.with_self_lock(src, StructureId::PutLog, |m| {
            m.append_put(src, trg, id, combine);
        })
    }

    /// Restores a salvaged put entry during recovery; stamps and data
    /// are unchanged and the original events stay in the history.
    pub(crate) fn relog_put(&mut self, id: ActionId) {
        let (src, trg, combine) = {
            let a = &self.actions[id.0];
            (a.src, a.trg, a.combine)
        };
        self.append_put(src, trg, id, combine);
    }

    fn append_put(&mut self, src: ProcessId, trg: ProcessId, id: ActionId, combine: bool) {
        let new = self.actions[id.0].clone();
        let entries = self.procs[src.index()]
            .logs
            .put_log
            .entry(trg.0)
            .or_default();
        let dup = entries.iter().any(|e| self.actions[e.0] == new);
        if !dup {
            entries.push(id);
        }
        if combine || !self.cfg.access_deterministic {
            self.procs[src.index()].logs.m_flag.insert(trg.0, true);
        }
    }

    /// Moves staged (optimistically delayed) entries into the real log.
    pub(crate) fn flush_staged_puts(&mut self, p: ProcessId) -> Result<(), MachineError> {
        let staged: Vec<(u32, Vec<ActionId>)> = self.procs[p.index()]
            .logs
            .staged_puts
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        if staged.iter().all(|(_, v)| v.is_empty()) {
            return Ok(());
        }
        self.procs[p.index()].logs.staged_puts.clear();
        self.with_self_lock(p, StructureId::PutLog, |m| {
            for (trg, ids) in &staged {
                for id in ids {
                    let combine = m.actions[id.0].combine;
                    m.append_put(p, ProcessId(*trg), *id, combine);
                }
            }
        })
    }

    fn with_self_lock(
        &mut self,
        p: ProcessId,
        structure: StructureId,
        f: impl FnOnce(&mut Machine),
    ) -> Result<(), MachineError> {
        match self.sync(SyncKind::Lock, p, Target::One(p), Some(structure))? {
            SyncOutcome::Done(_) => {}
            other => {
                return Err(MachineError::ProtocolOrder(format!(
                    "protocol self-lock unavailable: {other:?}"
                )))
            }
        }
        f(self);
        self.sync(SyncKind::Unlock, p, Target::One(p), Some(structure))?;
        Ok(())
    }

    /// Phase 1 of get logging: raise N at the target and queue the
    /// determinant. Runs right before the get is issued.
    pub(crate) fn log_get_phase1(&mut self, id: ActionId) {
        let (src, trg, det) = {
            let a = &self.actions[id.0];
            (a.src, a.trg, a.determinant())
        };
        self.procs[trg.index()].logs.n_flag.insert(src.0, true);
        self.procs[src.index()].logs.pending_gets.push(det);
    }

    /// Phase 2 of get logging, after the epoch closed: record the get
    /// (its data is now defined) in LG_trg[src] under the remote log's
    /// lock and drop the determinant from Q_src.
    pub(crate) fn log_get_phase2(&mut self, id: ActionId) -> Result<(), MachineError> {
        let (src, trg, det) = {
            let a = &self.actions[id.0];
            (a.src, a.trg, a.determinant())
        };
        debug_assert!(
            matches!(
                self.actions[id.0].data,
                crate::machine::action::AccessData::Get { value: Some(_), .. }
            ),
            "phase 2 requires the committed value"
        );
        if !self.procs[src.index()].logs.pending_gets.contains(&det) {
            return Err(MachineError::ProtocolOrder(
                "get phase 2 without phase 1".into(),
            ));
        }
        match self.sync(SyncKind::Lock, src, Target::One(trg), Some(StructureId::GetLog))? {
            SyncOutcome::Done(_) => {}
            other => {
                return Err(MachineError::ProtocolOrder(format!(
                    "get-log lock unavailable: {other:?}"
                )))
            }
        }
        let new = self.actions[id.0].clone();
        let entries = self.procs[trg.index()]
            .logs
            .get_log
            .entry(src.0)
            .or_default();
        if !entries.iter().any(|e| self.actions[e.0] == new) {
            entries.push(id);
        }
        let q = &mut self.procs[src.index()].logs.pending_gets;
        if let Some(pos) = q.iter().position(|d| *d == det) {
            q.remove(pos);
        }
        self.sync(SyncKind::Unlock, src, Target::One(trg), Some(StructureId::GetLog))?;
        Ok(())
    }

    /// Raises M at every issuer whose logged puts target this cell: a
    /// local write there could not be ordered against their replay.
    pub(crate) fn flag_conflicting_put_logs(&mut self, owner: ProcessId, cell: usize) {
        if !self.cfg.access_deterministic {
            return; // M is already raised on every logged put.
        }
        for r in 0..self.procs.len() {
            if r == owner.index() {
                continue;
            }
            let hit = self.procs[r].logs.put_log.get(&owner.0).is_some_and(|v| {
                v.iter().any(|id| self.actions[id.0].data.cell() == cell)
            });
            if hit {
                self.procs[r].logs.m_flag.insert(owner.0, true);
            }
        }
    }

    /// Deletes from LP_owner[peer] and LG_owner[peer] exactly the
    /// entries whose counters all lie strictly below the checkpoint
    /// confirmation, and clears M when no combining entry remains.
    /// Returns the number of removed entries; removing nothing is fine.
    pub fn trim_logs(
        &mut self,
        owner: ProcessId,
        peer: ProcessId,
        meta: &CkptConfirmation,
    ) -> usize {
        let below = |a: &Action| {
            a.stamp.ec < meta.epoch
                && a.stamp.gnc < meta.gnc
                && a.stamp.gc < meta.gc
                && a.stamp.sc < meta.sc
        };
        let mut removed = 0;
        for family in ["put", "get"] {
            let entries = {
                let logs = &mut self.procs[owner.index()].logs;
                match family {
                    "put" => logs.put_log.entry(peer.0).or_default().clone(),
                    _ => logs.get_log.entry(peer.0).or_default().clone(),
                }
            };
            let (drop, keep): (Vec<ActionId>, Vec<ActionId>) = entries
                .into_iter()
                .partition(|id| below(&self.actions[id.0]));
            removed += drop.len();
            let dropped: Vec<Action> = drop.iter().map(|id| self.actions[id.0].clone()).collect();
            let logs = &mut self.procs[owner.index()].logs;
            match family {
                "put" => logs.put_log.insert(peer.0, keep),
                _ => logs.get_log.insert(peer.0, keep),
            };
            logs.trimmed.entry(peer.0).or_default().extend(dropped);
        }
        let still_hazardous = {
            let logs = &self.procs[owner.index()].logs;
            let remaining = logs.put_log.get(&peer.0).map_or(&[][..], |v| v);
            remaining
                .iter()
                .any(|id| self.actions[id.0].combine)
                || (!self.cfg.access_deterministic && !remaining.is_empty())
        };
        self.procs[owner.index()]
            .logs
            .m_flag
            .insert(peer.0, still_hazardous);
        removed
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    pub fn put_log(&self, owner: ProcessId, peer: ProcessId) -> Vec<Action> {
        self.procs[owner.index()]
            .logs
            .put_log
            .get(&peer.0)
            .map_or(Vec::new(), |v| {
                v.iter().map(|id| self.actions[id.0].clone()).collect()
            })
    }

    pub fn get_log(&self, owner: ProcessId, peer: ProcessId) -> Vec<Action> {
        self.procs[owner.index()]
            .logs
            .get_log
            .get(&peer.0)
            .map_or(Vec::new(), |v| {
                v.iter().map(|id| self.actions[id.0].clone()).collect()
            })
    }

    pub fn pending_get_queue(&self, p: ProcessId) -> &[Determinant] {
        &self.procs[p.index()].logs.pending_gets
    }

    /// N_at[about]: `about` has an unfinished non-blocking get at `at`.
    pub fn n_flag(&self, at: ProcessId, about: ProcessId) -> bool {
        *self.procs[at.index()]
            .logs
            .n_flag
            .get(&about.0)
            .unwrap_or(&false)
    }

    /// M_at[about]: replaying LP_at[about] could double-apply.
    pub fn m_flag(&self, at: ProcessId, about: ProcessId) -> bool {
        *self.procs[at.index()]
            .logs
            .m_flag
            .get(&about.0)
            .unwrap_or(&false)
    }

    pub fn staged_put_count(&self, owner: ProcessId, peer: ProcessId) -> usize {
        self.procs[owner.index()]
            .logs
            .staged_puts
            .get(&peer.0)
            .map_or(0, Vec::len)
    }

    pub fn trimmed_log(&self, owner: ProcessId, peer: ProcessId) -> Vec<Action> {
        self.procs[owner.index()]
            .logs
            .trimmed
            .get(&peer.0)
            .cloned()
            .unwrap_or_default()
    }

    /// Total log entries stored at a process.
    pub fn stored_log_entries(&self, p: ProcessId) -> usize {
        self.procs[p.index()].logs.stored_entries()
    }

    /// The peer with the largest log footprint at `p`, following the
    /// demand-checkpoint selection rule.
    pub fn largest_logged_peer(&self, p: ProcessId) -> Option<ProcessId> {
        let logs = &self.procs[p.index()].logs;
        let mut best: Option<(usize, u32)> = None;
        for q in 0..self.procs.len() as u32 {
            if q == p.0 {
                continue;
            }
            let lp = logs.put_log.get(&q).map_or(0, Vec::len);
            let lg = logs.get_log.get(&q).map_or(0, Vec::len);
            let size = lp.max(lg);
            if size > 0 && best.is_none_or(|(s, _)| size > s) {
                best = Some((size, q));
            }
        }
        best.map(|(_, q)| ProcessId(q))
    }

    /// Test fixture: duplicates an existing log entry in place,
    /// bypassing the set semantics of normal appends. Recovery must
    /// detect the duplicate and fail its replay assertions.
    pub fn corrupt_duplicate_log_entry(
        &mut self,
        owner: ProcessId,
        peer: ProcessId,
        kind: AccessKind,
        index: usize,
    ) -> bool {
        let logs = &mut self.procs[owner.index()].logs;
        let family = match kind {
            AccessKind::Put => logs.put_log.entry(peer.0).or_default(),
            AccessKind::Get => logs.get_log.entry(peer.0).or_default(),
        };
        if index < family.len() {
            let id = family[index];
            family.push(id);
            true
        } else {
            false
        }
    }

    /// One JSON object per line describing every log structure.
    #[rustfmt::skip]
    pub fn logs_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for (i, s) in self.procs.iter().enumerate() {
            for (peer, entries) in &s.logs.put_log {
                if entries.is_empty() {
                    continue;
                }
                let acts: Vec<&Action> = entries.iter().map(|id| &self.actions[id.0]).collect();
                push(serde_json::json!({
                    "type": "put_log", "owner": i, "peer": peer, "entries": acts,
                }));
            }
            for (peer, entries) in &s.logs.get_log {
                if entries.is_empty() {
                    continue;
                }
                let acts: Vec<&Action> = entries.iter().map(|id| &self.actions[id.0]).collect();
                push(serde_json::json!({
                    "type": "get_log", "owner": i, "peer": peer, "entries": acts,
                }));
            }
            if !s.logs.pending_gets.is_empty() {
                push(serde_json::json!({
                    "type": "pending_gets", "owner": i, "entries": s.logs.pending_gets,
                }));
            }
            for (peer, flag) in &s.logs.n_flag {
                if *flag {
                    push(serde_json::json!({"type": "n_flag", "at": i, "about": peer}));
                }
            }
            for (peer, flag) in &s.logs.m_flag {
                if *flag {
                    push(serde_json::json!({"type": "m_flag", "at": i, "about": peer}));
                }
            }
        }
        out
    }
}
