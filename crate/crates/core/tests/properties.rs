//! Property tests: machine semantics against an independent shadow
//! model, and determinism of whole scenario runs.

use std::collections::BTreeMap;

use proptest::prelude::*;

use rmaft_core::sim::{
    reference_run, run_scenario, FaultSpec, ProtocolConfig, Scenario, WorkloadSpec,
};
use rmaft_core::{
    AccessData, Machine, MachineConfig, ProcessId, SyncKind, SyncOutcome, Target, Word,
};

const N: u32 = 4;
const WINDOW: usize = 8;

/// Composite operations that never block when driven sequentially.
#[derive(Debug, Clone)]
enum ShadowOp {
    Put {
        src: u32,
        trg: u32,
        cell: usize,
        value: Word,
        combine: bool,
    },
    Get {
        src: u32,
        trg: u32,
        cell: usize,
    },
    FlushOne {
        src: u32,
        trg: u32,
    },
    FlushAll {
        src: u32,
    },
    GsyncRound,
    /// lock, put, unlock as one critical section.
    Cs {
        src: u32,
        trg: u32,
        cell: usize,
        value: Word,
    },
    LocalWrite {
        p: u32,
        cell: usize,
        value: Word,
    },
}

fn distinct_pair() -> impl Strategy<Value = (u32, u32)> {
    (0..N, 0..N - 1).prop_map(|(a, b)| {
        let second = if b >= a { b + 1 } else { b };
        (a, second)
    })
}

fn shadow_op() -> impl Strategy<Value = ShadowOp> {
    prop_oneof![
        (distinct_pair(), 0..WINDOW, any::<Word>(), any::<bool>()).prop_map(
            |((src, trg), cell, value, combine)| ShadowOp::Put {
                src,
                trg,
                cell,
                value,
                combine
            }
        ),
        (distinct_pair(), 0..WINDOW).prop_map(|((src, trg), cell)| ShadowOp::Get {
            src,
            trg,
            cell
        }),
        distinct_pair().prop_map(|(src, trg)| ShadowOp::FlushOne { src, trg }),
        (0..N).prop_map(|src| ShadowOp::FlushAll { src }),
        Just(ShadowOp::GsyncRound),
        (distinct_pair(), 0..WINDOW, any::<Word>()).prop_map(|((src, trg), cell, value)| {
            ShadowOp::Cs {
                src,
                trg,
                cell,
                value,
            }
        }),
        (0..N, 0..WINDOW, any::<Word>()).prop_map(|(p, cell, value)| ShadowOp::LocalWrite {
            p,
            cell,
            value
        }),
    ]
}

/// Independent model of the epoch-buffering semantics: puts and gets
/// stay pending per pair and apply in global issue order at the pair's
/// close.
#[derive(Default)]
struct Shadow {
    mem: Vec<Vec<Word>>,
    pending: BTreeMap<(u32, u32), Vec<(u64, ShadowEntry)>>,
    closes: BTreeMap<(u32, u32), u64>,
    seq: u64,
}

enum ShadowEntry {
    Put(usize, Word, bool),
    Get(usize),
}

impl Shadow {
    fn new() -> Self {
        Shadow {
            mem: vec![vec![0; WINDOW]; N as usize],
            ..Shadow::default()
        }
    }

    fn issue(&mut self, src: u32, trg: u32, e: ShadowEntry) {
        let seq = self.seq;
        self.seq += 1;
        self.pending.entry((src, trg)).or_default().push((seq, e));
    }

    /// Returns the values the closed gets observed.
    fn close(&mut self, src: u32, trg: u32) -> Vec<Word> {
        let mut observed = Vec::new();
        for (_, e) in self.pending.remove(&(src, trg)).unwrap_or_default() {
            match e {
                ShadowEntry::Put(cell, value, combine) => {
                    let m = &mut self.mem[trg as usize][cell];
                    *m = if combine { m.wrapping_add(value) } else { value };
                }
                ShadowEntry::Get(cell) => observed.push(self.mem[trg as usize][cell]),
            }
        }
        *self.closes.entry((src, trg)).or_default() += 1;
        observed
    }

    fn gsync(&mut self) {
        // All pending accesses of all pairs commit in issue order.
        let mut all: Vec<(u64, u32, u32, ShadowEntry)> = Vec::new();
        for ((src, trg), v) in std::mem::take(&mut self.pending) {
            for (seq, e) in v {
                all.push((seq, src, trg, e));
            }
        }
        all.sort_by_key(|(seq, ..)| *seq);
        for (_, _, trg, e) in all {
            if let ShadowEntry::Put(cell, value, combine) = e {
                let m = &mut self.mem[trg as usize][cell];
                *m = if combine { m.wrapping_add(value) } else { value };
            }
        }
        for src in 0..N {
            for trg in 0..N {
                if src != trg {
                    *self.closes.entry((src, trg)).or_default() += 1;
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Epoch buffering, epoch counting, read values, hb acyclicity and
    /// gsync collectivity, all against the shadow model.
    #[test]
    fn machine_agrees_with_the_shadow_model(ops in proptest::collection::vec(shadow_op(), 1..60)) {
        let mut m = Machine::new(MachineConfig {
            n_procs: N,
            window_size: WINDOW,
            ..MachineConfig::default()
        });
        let mut shadow = Shadow::new();
        let mut issued_gets: Vec<(rmaft_core::ActionId, Word)> = Vec::new();
        for op in &ops {
            match *op {
                ShadowOp::Put { src, trg, cell, value, combine } => {
                    m.issue_put(ProcessId(src), ProcessId(trg), cell, value, combine, false).unwrap();
                    shadow.issue(src, trg, ShadowEntry::Put(cell, value, combine));
                }
                ShadowOp::Get { src, trg, cell } => {
                    m.issue_get(ProcessId(src), ProcessId(trg), cell, false).unwrap();
                    shadow.issue(src, trg, ShadowEntry::Get(cell));
                }
                ShadowOp::FlushOne { src, trg } => {
                    let gets_before: Vec<_> = m.pending_accesses(ProcessId(src))
                        .into_iter()
                        .filter(|id| {
                            let a = m.action(*id);
                            a.trg == ProcessId(trg) && a.kind == rmaft_core::AccessKind::Get
                        })
                        .collect();
                    m.sync(SyncKind::Flush, ProcessId(src), Target::One(ProcessId(trg)), None).unwrap();
                    let observed = shadow.close(src, trg);
                    for (id, want) in gets_before.iter().zip(observed) {
                        issued_gets.push((*id, want));
                    }
                }
                ShadowOp::FlushAll { src } => {
                    m.sync(SyncKind::Flush, ProcessId(src), Target::All, None).unwrap();
                    for trg in 0..N {
                        if trg != src {
                            shadow.close(src, trg);
                        }
                    }
                }
                ShadowOp::GsyncRound => {
                    for p in 0..N {
                        m.sync(SyncKind::Gsync, ProcessId(p), Target::All, None).unwrap();
                    }
                    shadow.gsync();
                    let first = m.gnc(ProcessId(0));
                    for p in 1..N {
                        prop_assert_eq!(m.gnc(ProcessId(p)), first, "gsync collectivity");
                    }
                }
                ShadowOp::Cs { src, trg, cell, value } => {
                    match m.sync(SyncKind::Lock, ProcessId(src), Target::One(ProcessId(trg)), None).unwrap() {
                        SyncOutcome::Done(_) => {}
                        other => prop_assert!(false, "sequential lock blocked: {:?}", other),
                    }
                    m.issue_put(ProcessId(src), ProcessId(trg), cell, value, false, false).unwrap();
                    shadow.issue(src, trg, ShadowEntry::Put(cell, value, false));
                    m.sync(SyncKind::Unlock, ProcessId(src), Target::One(ProcessId(trg)), None).unwrap();
                    shadow.close(src, trg);
                    prop_assert_eq!(m.lc(ProcessId(src)), 0);
                }
                ShadowOp::LocalWrite { p, cell, value } => {
                    m.local_write(ProcessId(p), cell, value).unwrap();
                    shadow.mem[p as usize][cell] = value;
                }
            }
            // Committed memory never shows a buffered access.
            for p in 0..N {
                prop_assert_eq!(m.memory(ProcessId(p)), &shadow.mem[p as usize][..]);
            }
        }
        // E(p -> q) counts exactly the epoch-closing syncs of the pair.
        for src in 0..N {
            for trg in 0..N {
                if src != trg {
                    let want = shadow.closes.get(&(src, trg)).copied().unwrap_or(0);
                    prop_assert_eq!(m.epoch(ProcessId(src), ProcessId(trg)), want);
                }
            }
        }
        // Committed gets observed exactly the shadow's values.
        for (id, want) in issued_gets {
            match m.action(id).data {
                AccessData::Get { value: Some(v), .. } => prop_assert_eq!(v, want),
                ref other => prop_assert!(false, "get stayed unresolved: {:?}", other),
            }
        }
        prop_assert!(m.order().assert_acyclic());
    }

    /// A scenario is a pure function of its JSON: reports match byte
    /// for byte, and fault-free runs reproduce the reference digest.
    #[test]
    fn scenario_runs_are_deterministic(
        seed in any::<u64>(),
        n in 2u32..8,
        rounds in 1u32..4,
        fault_at in 20u64..60,
        inject in any::<bool>(),
    ) {
        let scenario = Scenario {
            n_procs: n,
            window_size: 2 * n as usize + 16,
            workload: WorkloadSpec::RandomGsync {
                rounds,
                puts_per_round: 1.min(n - 1),
                gets_per_round: 1.min(n - 1),
                epochs_per_round: 1,
                combining: false,
                local_ops: true,
            },
            protocol: ProtocolConfig::default(),
            faults: if inject {
                vec![FaultSpec { victim: seed as u32 % n, event_index: fault_at }]
            } else {
                Vec::new()
            },
            corruptions: Vec::new(),
            seed,
        };
        let reference = reference_run(&scenario).unwrap();
        prop_assume!(!inject || fault_at < reference.event_count * 7 / 8);
        let a = run_scenario(&scenario).unwrap();
        let b = run_scenario(&scenario).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert!(a.assertion_failures.is_empty(), "{:?}", a.assertion_failures);
        prop_assert_eq!(a.final_memory_digest, reference.final_memory_digest);
    }
}
