use super::action::*;
use super::order::{EventKind, OrderRelation, OrderResult};
use super::*;
use crate::error::MachineError;

fn machine(n: u32, window: usize) -> Machine {
    Machine::new(MachineConfig {
        n_procs: n,
        window_size: window,
        ..MachineConfig::default()
    })
}

fn p(i: u32) -> ProcessId {
    ProcessId(i)
}

fn flush(m: &mut Machine, src: u32, trg: u32) {
    m.sync(SyncKind::Flush, p(src), Target::One(p(trg)), None)
        .unwrap();
}

#[test]
fn put_is_buffered_until_flush() {
    let mut m = machine(2, 8);
    m.issue_put(p(0), p(1), 3, 7, false, false).unwrap();
    assert_eq!(m.memory(p(1))[3], 0, "buffered before the epoch closes");
    flush(&mut m, 0, 1);
    assert_eq!(m.memory(p(1))[3], 7);
}

#[test]
fn same_epoch_puts_commit_in_issue_order() {
    let mut m = machine(2, 8);
    let a = m.issue_put(p(0), p(1), 2, 5, false, false).unwrap();
    let b = m.issue_put(p(0), p(1), 2, 9, false, false).unwrap();
    flush(&mut m, 0, 1);
    assert_eq!(m.memory(p(1))[2], 9);
    // Same epoch: the order graph keeps them co-parallel.
    let (ia, ib) = (m.order().access(a).unwrap().issue, m.order().access(b).unwrap().issue);
    assert_eq!(
        m.order().order_query(ia, ib, OrderRelation::Co).unwrap(),
        OrderResult::Parallel
    );
    assert_eq!(
        m.order().order_query(ia, ib, OrderRelation::Po).unwrap(),
        OrderResult::OrderedForward
    );
}

#[test]
fn combining_put_accumulates() {
    let mut m = machine(2, 8);
    m.issue_put(p(0), p(1), 4, 6, false, false).unwrap();
    flush(&mut m, 0, 1);
    m.issue_put(p(0), p(1), 4, 4, true, false).unwrap();
    flush(&mut m, 0, 1);
    assert_eq!(m.memory(p(1))[4], 10);
}

#[test]
fn get_reads_committed_value_at_epoch_close() {
    let mut m = machine(2, 8);
    m.local_write(p(1), 2, 42).unwrap();
    let g = m.issue_get(p(0), p(1), 2, false).unwrap();
    assert_eq!(
        m.action(g).data,
        AccessData::Get { cell: 2, value: None }
    );
    flush(&mut m, 0, 1);
    assert_eq!(
        m.action(g).data,
        AccessData::Get {
            cell: 2,
            value: Some(42)
        }
    );
}

#[test]
fn get_sees_pre_epoch_value_of_open_puts() {
    let mut m = machine(3, 8);
    m.issue_put(p(2), p(1), 5, 99, false, false).unwrap(); // still open
    let g = m.issue_get(p(0), p(1), 5, false).unwrap();
    flush(&mut m, 0, 1);
    assert_eq!(
        m.action(g).data,
        AccessData::Get {
            cell: 5,
            value: Some(0)
        },
        "the open put of p2 has not committed"
    );
}

#[test]
fn flush_increments_epoch_exactly_once() {
    let mut m = machine(2, 8);
    m.issue_put(p(0), p(1), 0, 1, false, false).unwrap();
    assert_eq!(m.epoch(p(0), p(1)), 0);
    flush(&mut m, 0, 1);
    assert_eq!(m.epoch(p(0), p(1)), 1);
}

#[test]
fn gsync_commits_and_bumps_every_gnc() {
    let mut m = machine(4, 8);
    m.issue_put(p(0), p(1), 1, 11, false, false).unwrap();
    m.issue_put(p(2), p(3), 2, 22, false, false).unwrap();
    for i in 0..3 {
        assert_eq!(
            m.sync(SyncKind::Gsync, p(i), Target::All, None).unwrap(),
            SyncOutcome::GsyncWaiting
        );
    }
    assert!(matches!(
        m.sync(SyncKind::Gsync, p(3), Target::All, None).unwrap(),
        SyncOutcome::GsyncCompleted { .. }
    ));
    assert_eq!(m.memory(p(1))[1], 11);
    assert_eq!(m.memory(p(3))[2], 22);
    for i in 0..4 {
        assert_eq!(m.gnc(p(i)), 1);
    }
    assert!(m.at_gsync_point());
}

#[test]
fn lock_blocks_second_acquirer_and_sc_differs_by_one() {
    let mut m = machine(3, 8);
    assert!(matches!(
        m.sync(SyncKind::Lock, p(0), Target::One(p(2)), None).unwrap(),
        SyncOutcome::Done(_)
    ));
    assert_eq!(
        m.sync(SyncKind::Lock, p(1), Target::One(p(2)), None).unwrap(),
        SyncOutcome::Blocked
    );
    let sc0 = m.cur_sc(p(0));
    m.sync(SyncKind::Unlock, p(0), Target::One(p(2)), None)
        .unwrap();
    assert!(matches!(
        m.sync(SyncKind::Lock, p(1), Target::One(p(2)), None).unwrap(),
        SyncOutcome::Done(_)
    ));
    assert_eq!(m.cur_sc(p(1)), sc0 + 1);
    m.sync(SyncKind::Unlock, p(1), Target::One(p(2)), None)
        .unwrap();
    assert_eq!(m.lc(p(0)), 0);
    assert_eq!(m.lc(p(1)), 0);
}

#[test]
fn unlock_without_lock_is_an_error() {
    let mut m = machine(2, 8);
    let err = m
        .sync(SyncKind::Unlock, p(0), Target::One(p(1)), None)
        .unwrap_err();
    assert!(matches!(err, MachineError::UnlockWithoutLock { .. }));
}

#[test]
fn local_ops_are_immediate_and_zero_initialized() {
    let mut m = machine(2, 8);
    assert_eq!(m.local_read(p(0), 5).unwrap(), 0);
    m.local_write(p(0), 0, 5).unwrap();
    assert_eq!(m.local_read(p(0), 0).unwrap(), 5);
}

#[test]
fn bounds_and_crashed_and_self_target_errors() {
    let mut m = machine(2, 4);
    assert!(matches!(
        m.issue_put(p(0), p(1), 9, 1, false, false).unwrap_err(),
        MachineError::OutOfBounds { .. }
    ));
    assert!(matches!(
        m.issue_put(p(0), p(0), 1, 1, false, false).unwrap_err(),
        MachineError::SelfTarget(_)
    ));
    m.crash(p(1)).unwrap();
    assert!(matches!(
        m.issue_put(p(0), p(1), 1, 1, false, false).unwrap_err(),
        MachineError::CrashedProcess(_)
    ));
}

#[test]
fn epoch_ordering_is_co_and_cross_source_is_parallel() {
    let mut m = machine(3, 8);
    let a = m.issue_put(p(0), p(1), 1, 1, false, false).unwrap();
    flush(&mut m, 0, 1);
    let b = m.issue_put(p(0), p(1), 1, 2, false, false).unwrap();
    let c = m.issue_put(p(2), p(1), 2, 3, false, false).unwrap();
    let g = m.order();
    let (ia, ib, ic) = (
        g.access(a).unwrap().issue,
        g.access(b).unwrap().issue,
        g.access(c).unwrap().issue,
    );
    assert_eq!(
        g.order_query(ia, ib, OrderRelation::Co).unwrap(),
        OrderResult::OrderedForward,
        "epoch k before epoch k+1"
    );
    assert_eq!(
        g.order_query(ia, ic, OrderRelation::Co).unwrap(),
        OrderResult::Parallel,
        "different sources stay co-parallel without synchronization"
    );
}

#[test]
fn gsync_adds_hb_between_participants() {
    let mut m = machine(2, 8);
    let a = m.issue_put(p(0), p(1), 1, 1, false, false).unwrap();
    m.sync(SyncKind::Gsync, p(0), Target::All, None).unwrap();
    m.sync(SyncKind::Gsync, p(1), Target::All, None).unwrap();
    let b = m.issue_put(p(1), p(0), 2, 2, false, false).unwrap();
    let g = m.order();
    let (ia, ib) = (g.access(a).unwrap().issue, g.access(b).unwrap().issue);
    assert_eq!(
        g.order_query(ia, ib, OrderRelation::Hb).unwrap(),
        OrderResult::OrderedForward
    );
}

#[test]
fn gsync_without_hb_flag_keeps_processes_hb_parallel() {
    let mut m = Machine::new(MachineConfig {
        n_procs: 2,
        window_size: 8,
        gsync_adds_hb: false,
        ..MachineConfig::default()
    });
    let a = m.issue_put(p(0), p(1), 1, 1, false, false).unwrap();
    m.sync(SyncKind::Gsync, p(0), Target::All, None).unwrap();
    m.sync(SyncKind::Gsync, p(1), Target::All, None).unwrap();
    let b = m.issue_put(p(1), p(0), 2, 2, false, false).unwrap();
    let g = m.order();
    let (ia, ib) = (g.access(a).unwrap().issue, g.access(b).unwrap().issue);
    assert_eq!(
        g.order_query(ia, ib, OrderRelation::Hb).unwrap(),
        OrderResult::Parallel
    );
}

#[test]
fn unlock_creates_so_edge_to_next_acquirer() {
    let mut m = machine(3, 8);
    m.sync(SyncKind::Lock, p(0), Target::One(p(2)), None).unwrap();
    let a = m.issue_put(p(0), p(2), 1, 1, false, false).unwrap();
    m.sync(SyncKind::Unlock, p(0), Target::One(p(2)), None)
        .unwrap();
    m.sync(SyncKind::Lock, p(1), Target::One(p(2)), None).unwrap();
    let b = m.issue_put(p(1), p(2), 2, 2, false, false).unwrap();
    let g = m.order();
    let (ia, ib) = (g.access(a).unwrap().issue, g.access(b).unwrap().issue);
    assert_eq!(
        g.order_query(ia, ib, OrderRelation::Hb).unwrap(),
        OrderResult::OrderedForward,
        "po to unlock, so to the next lock, po to the put"
    );
    assert_eq!(
        g.order_query(ia, ib, OrderRelation::So).unwrap(),
        OrderResult::Parallel,
        "so alone only links the sync events themselves"
    );
}

#[test]
fn blocking_access_closes_its_own_epoch() {
    let mut m = machine(2, 8);
    m.issue_put(p(0), p(1), 3, 7, false, true).unwrap();
    assert_eq!(m.memory(p(1))[3], 7, "blocking put commits immediately");
    assert_eq!(m.epoch(p(0), p(1)), 1);
}

#[test]
fn atomic_counts_as_put_and_get() {
    let mut m = machine(2, 8);
    m.local_write(p(1), 2, 40).unwrap();
    let (put_id, get_id) = m.issue_atomic(p(0), p(1), 2, 3).unwrap();
    assert_eq!(m.memory(p(1))[2], 43);
    assert!(m.action(put_id).combine);
    assert_eq!(
        m.action(get_id).data,
        AccessData::Get {
            cell: 2,
            value: Some(40)
        }
    );
    assert_eq!(m.put_log(p(0), p(1)).len(), 1);
    assert_eq!(m.get_log(p(1), p(0)).len(), 1);
}

#[test]
fn crash_releases_locks_and_loses_state() {
    let mut m = machine(3, 8);
    m.sync(SyncKind::Lock, p(0), Target::One(p(2)), None).unwrap();
    m.issue_put(p(0), p(2), 1, 5, false, false).unwrap();
    let ctx = m.crash(p(0)).unwrap();
    assert_eq!(ctx.held_locks.len(), 1);
    assert_eq!(ctx.pending.len(), 1);
    assert!(m.is_crashed(p(0)));
    assert!(m.lock_holder(p(2), None).is_none());
    // The blocked peer can now take the lock.
    assert!(matches!(
        m.sync(SyncKind::Lock, p(1), Target::One(p(2)), None).unwrap(),
        SyncOutcome::Done(_)
    ));
}

#[test]
fn gsync_by_strict_subset_leaves_round_open() {
    let mut m = machine(3, 8);
    assert_eq!(
        m.sync(SyncKind::Gsync, p(0), Target::All, None).unwrap(),
        SyncOutcome::GsyncWaiting
    );
    assert_eq!(
        m.sync(SyncKind::Gsync, p(1), Target::All, None).unwrap(),
        SyncOutcome::GsyncWaiting
    );
    assert_eq!(m.completed_gsync_rounds(), 0);
    assert!(matches!(
        m.sync(SyncKind::Gsync, p(2), Target::All, None).unwrap(),
        SyncOutcome::GsyncCompleted { .. }
    ));
}

#[test]
fn epoch_counts_match_closing_syncs() {
    let mut m = machine(3, 8);
    m.issue_put(p(0), p(1), 0, 1, false, false).unwrap();
    flush(&mut m, 0, 1);
    m.sync(SyncKind::Lock, p(0), Target::One(p(1)), None).unwrap();
    m.sync(SyncKind::Unlock, p(0), Target::One(p(1)), None)
        .unwrap();
    for i in 0..3 {
        m.sync(SyncKind::Gsync, p(i), Target::All, None).unwrap();
    }
    // one flush + one unlock + one gsync
    assert_eq!(m.epoch(p(0), p(1)), 3);
    assert_eq!(m.epoch(p(0), p(2)), 1, "gsync closes every pair");
}

#[test]
fn trace_dump_is_one_json_object_per_line() {
    let mut m = machine(2, 8);
    m.issue_put(p(0), p(1), 1, 9, false, false).unwrap();
    flush(&mut m, 0, 1);
    let dump = m.trace_jsonl();
    for line in dump.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("event").is_some());
        assert!(v.get("proc").is_some());
    }
    assert!(dump.lines().count() >= 3);
}

#[test]
fn order_query_unknown_event_errors() {
    let m = machine(2, 8);
    let err = m
        .order()
        .order_query(
            crate::machine::order::EventId(0),
            crate::machine::order::EventId(1),
            OrderRelation::Po,
        )
        .unwrap_err();
    assert!(matches!(err, MachineError::UnknownEvent(_)));
}

#[test]
fn local_write_conflicting_with_logged_put_raises_m() {
    let mut m = machine(2, 8);
    m.issue_put(p(0), p(1), 3, 7, true, false).unwrap();
    flush(&mut m, 0, 1);
    // p1 now writes the cell the logged combining put touched.
    assert!(m.m_flag(p(0), p(1)), "combining put raises M by itself");
    let mut m2 = machine(2, 8);
    m2.issue_put(p(0), p(1), 3, 7, false, false).unwrap();
    flush(&mut m2, 0, 1);
    assert!(!m2.m_flag(p(0), p(1)));
    m2.local_write(p(1), 3, 1).unwrap();
    assert!(
        m2.m_flag(p(0), p(1)),
        "a write co-parallel to a logged put forces the conservatism"
    );
}

#[test]
fn hb_stays_acyclic_across_collectives() {
    let mut m = machine(3, 8);
    for _ in 0..3 {
        for i in 0..3 {
            m.issue_put(p(i), p((i + 1) % 3), 0, 1, false, false).unwrap();
        }
        for i in 0..3 {
            m.sync(SyncKind::Gsync, p(i), Target::All, None).unwrap();
        }
    }
    assert!(m.order().assert_acyclic());
    // no event may hb-precede itself transitively: spot-check a pair
    let events = m.order().events();
    let first = events.first().unwrap().id;
    let last = events.last().unwrap().id;
    assert_ne!(
        m.order().order_query(first, last, OrderRelation::Hb).unwrap(),
        OrderResult::OrderedBackward
    );
}

#[test]
fn noop_records_an_event() {
    let mut m = machine(2, 4);
    let before = m.event_count();
    m.noop(p(0)).unwrap();
    assert_eq!(m.event_count(), before + 1);
    assert!(matches!(
        m.order().events().last().unwrap().kind,
        EventKind::Noop
    ));
}
