//! Seed-deterministic workload generators.
//!
//! Generated programs are branch-free op lists; a run's outcome is a
//! pure function of the scenario. Access-deterministic workloads keep
//! one writer per (target, cell): replacing puts go only to cells the
//! writer map assigns to the issuer, local writes stay in a reserved
//! band of the owner's window, and the shared accumulator cell takes
//! combining puts only (addition commutes, so order cannot matter).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;
use crate::machine::action::Word;

/// One program step. Targets and cells are resolved at generation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum Op {
    Put {
        trg: u32,
        cell: usize,
        value: Word,
        combine: bool,
        blocking: bool,
    },
    Get {
        trg: u32,
        cell: usize,
        blocking: bool,
    },
    /// Fetch-and-add; counts as both a put and a get.
    Atomic {
        trg: u32,
        cell: usize,
        add: Word,
    },
    Flush {
        /// `None` flushes all targets.
        trg: Option<u32>,
    },
    Gsync,
    Lock {
        trg: u32,
    },
    Unlock {
        trg: u32,
    },
    LocalRead {
        cell: usize,
    },
    LocalWrite {
        cell: usize,
        value: Word,
    },
    Nop,
}

/// The workload families a scenario can run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum WorkloadSpec {
    /// Rounds of puts and gets closed by a global gsync, with optional
    /// mid-round epochs, local operations, and combining traffic.
    RandomGsync {
        rounds: u32,
        puts_per_round: u32,
        gets_per_round: u32,
        #[serde(default = "default_one")]
        epochs_per_round: u32,
        #[serde(default)]
        combining: bool,
        #[serde(default)]
        local_ops: bool,
    },
    /// Lock-protected critical sections of puts at the locked process.
    LockPut {
        critical_sections: u32,
        puts_per_cs: u32,
        #[serde(default)]
        local_ops: bool,
    },
    /// Distributed-hashtable inserts: one atomic per collision-free
    /// insert, the full overflow-chain sequence on collision.
    Kvstore {
        inserts: u32,
        key_range: u64,
        slots: u32,
        #[serde(default)]
        mean_wait_events: f64,
    },
}

fn default_one() -> u32 {
    1
}

/// Facts the generator knows about the emitted programs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadMeta {
    pub collisions: u32,
    pub inserts: u32,
}

pub struct GeneratedWorkload {
    pub programs: Vec<Vec<Op>>,
    pub meta: WorkloadMeta,
}

/// Start of the remote band: cells below this are owner-local.
fn local_band(window: usize) -> usize {
    window / 4
}

/// The single writer allowed to issue replacing puts into a remote
/// cell. Cycles over all non-owner processes.
fn cell_writer(trg: u32, cell: usize, n: u32) -> u32 {
    let others = n - 1;
    let k = (cell as u32) % others;
    let w = (trg + 1 + k) % n;
    debug_assert_ne!(w, trg);
    w
}

/// Cells of `trg`'s window that `src` may overwrite.
fn writable_cells(src: u32, trg: u32, window: usize, n: u32) -> Vec<usize> {
    let lo = local_band(window);
    let hi = window - 1; // last cell is the combining accumulator
    (lo..hi).filter(|&c| cell_writer(trg, c, n) == src).collect()
}

pub fn generate(
    spec: &WorkloadSpec,
    n_procs: u32,
    window: usize,
    seed: u64,
) -> Result<GeneratedWorkload, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        WorkloadSpec::RandomGsync {
            rounds,
            puts_per_round,
            gets_per_round,
            epochs_per_round,
            combining,
            local_ops,
        } => gen_random_gsync(
            &mut rng,
            n_procs,
            window,
            *rounds,
            *puts_per_round,
            *gets_per_round,
            (*epochs_per_round).max(1),
            *combining,
            *local_ops,
        ),
        WorkloadSpec::LockPut {
            critical_sections,
            puts_per_cs,
            local_ops,
        } => gen_lock_put(
            &mut rng,
            n_procs,
            window,
            *critical_sections,
            *puts_per_cs,
            *local_ops,
        ),
        WorkloadSpec::Kvstore {
            inserts,
            key_range,
            slots,
            mean_wait_events,
        } => gen_kvstore(
            &mut rng,
            n_procs,
            window,
            *inserts,
            *key_range,
            *slots,
            *mean_wait_events,
        ),
    }
}

fn sample_distinct_targets(rng: &mut ChaCha8Rng, me: u32, n: u32, count: u32) -> Vec<u32> {
    let mut others: Vec<u32> = (0..n).filter(|&q| q != me).collect();
    others.shuffle(rng);
    others.truncate(count as usize);
    others
}

#[allow(clippy::too_many_arguments)]
fn gen_random_gsync(
    rng: &mut ChaCha8Rng,
    n: u32,
    window: usize,
    rounds: u32,
    puts: u32,
    gets: u32,
    epochs: u32,
    combining: bool,
    local_ops: bool,
) -> Result<GeneratedWorkload, ScenarioError> {
    if n < 2 {
        return Err(ScenarioError::Validation(
            "random_gsync needs at least two processes".into(),
        ));
    }
    if puts.max(gets) > n - 1 {
        return Err(ScenarioError::Validation(format!(
            "at most {} accesses per pair and epoch keep determinants unique",
            n - 1
        )));
    }
    let need = (n - 1) as usize;
    if window - 1 - local_band(window) < need {
        return Err(ScenarioError::Validation(format!(
            "window of {window} words is too small to give every pair a writable cell; \
             need at least {}",
            local_band(window) + need + 1
        )));
    }
    let acc_cell = window - 1;
    let mut programs: Vec<Vec<Op>> = vec![Vec::new(); n as usize];
    for _ in 0..rounds {
        for p in 0..n {
            let prog: &mut Vec<Op> = &mut programs[p as usize];
            for e in 0..epochs {
                for t in sample_distinct_targets(rng, p, n, puts) {
                    let cells = writable_cells(p, t, window, n);
                    let cell = cells[rng.gen_range(0..cells.len())];
                    prog.push(Op::Put {
                        trg: t,
                        cell,
                        value: rng.gen(),
                        combine: false,
                        blocking: rng.gen_bool(0.05),
                    });
                }
                for t in sample_distinct_targets(rng, p, n, gets) {
                    let cell = rng.gen_range(0..window);
                    prog.push(Op::Get {
                        trg: t,
                        cell,
                        blocking: rng.gen_bool(0.05),
                    });
                }
                if local_ops {
                    let band = local_band(window);
                    if band > 0 && rng.gen_bool(0.5) {
                        prog.push(Op::LocalWrite {
                            cell: rng.gen_range(0..band),
                            value: rng.gen(),
                        });
                    }
                    if rng.gen_bool(0.3) {
                        prog.push(Op::LocalRead {
                            cell: rng.gen_range(0..window),
                        });
                    }
                }
                if e + 1 < epochs {
                    prog.push(Op::Flush { trg: None });
                }
            }
            if combining {
                // Every process receives combining traffic each round,
                // so any crash victim has a combining put against it.
                prog.push(Op::Put {
                    trg: (p + 1) % n,
                    cell: acc_cell,
                    value: rng.gen_range(1..100),
                    combine: true,
                    blocking: false,
                });
                if rng.gen_bool(0.3) {
                    let t = sample_distinct_targets(rng, p, n, 1)[0];
                    prog.push(Op::Put {
                        trg: t,
                        cell: acc_cell,
                        value: rng.gen_range(1..100),
                        combine: true,
                        blocking: false,
                    });
                }
            }
            prog.push(Op::Gsync);
        }
    }
    Ok(GeneratedWorkload {
        programs,
        meta: WorkloadMeta::default(),
    })
}

fn gen_lock_put(
    rng: &mut ChaCha8Rng,
    n: u32,
    window: usize,
    critical_sections: u32,
    puts_per_cs: u32,
    local_ops: bool,
) -> Result<GeneratedWorkload, ScenarioError> {
    if n < 2 {
        return Err(ScenarioError::Validation(
            "lock_put needs at least two processes".into(),
        ));
    }
    if puts_per_cs == 0 {
        return Err(ScenarioError::Validation(
            "critical sections need at least one put".into(),
        ));
    }
    let need = (n - 1) as usize;
    if window - 1 - local_band(window) < need {
        return Err(ScenarioError::Validation(format!(
            "window of {window} words is too small; need at least {}",
            local_band(window) + need + 1
        )));
    }
    let mut programs: Vec<Vec<Op>> = vec![Vec::new(); n as usize];
    for _ in 0..critical_sections {
        for p in 0..n {
            let prog: &mut Vec<Op> = &mut programs[p as usize];
            let t = sample_distinct_targets(rng, p, n, 1)[0];
            prog.push(Op::Lock { trg: t });
            let cells = writable_cells(p, t, window, n);
            for k in 0..puts_per_cs {
                let cell = cells[rng.gen_range(0..cells.len())];
                prog.push(Op::Put {
                    trg: t,
                    cell,
                    value: rng.gen(),
                    combine: false,
                    blocking: false,
                });
                // Each put in its own epoch: the in-CS flush keeps
                // determinants unique across the section.
                if k + 1 < puts_per_cs {
                    prog.push(Op::Flush { trg: Some(t) });
                }
            }
            prog.push(Op::Unlock { trg: t });
            if local_ops {
                let band = local_band(window);
                if band > 0 && rng.gen_bool(0.4) {
                    prog.push(Op::LocalWrite {
                        cell: rng.gen_range(0..band),
                        value: rng.gen(),
                    });
                }
            }
        }
    }
    Ok(GeneratedWorkload {
        programs,
        meta: WorkloadMeta::default(),
    })
}

/// Per-volume hashtable layout inside one window:
/// `[0, slots)` slot table, then the free pointer and tail pointer,
/// then the overflow heap of (value, link) pairs.
struct Volume {
    occupied: Vec<bool>,
    overflow: u32,
    heap_cap: u32,
}

fn gen_kvstore(
    rng: &mut ChaCha8Rng,
    n: u32,
    window: usize,
    inserts: u32,
    key_range: u64,
    slots: u32,
    mean_wait_events: f64,
) -> Result<GeneratedWorkload, ScenarioError> {
    if n < 2 {
        return Err(ScenarioError::Validation(
            "kvstore needs at least two processes".into(),
        ));
    }
    if slots == 0 || key_range < slots as u64 {
        return Err(ScenarioError::Validation(
            "kvstore requires key range >= slots > 0".into(),
        ));
    }
    let ptr_free = slots as usize;
    let ptr_last = slots as usize + 1;
    let heap_base = slots as usize + 2;
    if window <= heap_base {
        return Err(ScenarioError::Validation(format!(
            "window of {window} words cannot hold {slots} slots plus pointers"
        )));
    }
    let heap_cap = ((window - heap_base) / 2) as u32;
    let mut volumes: Vec<Volume> = (0..n)
        .map(|_| Volume {
            occupied: vec![false; slots as usize],
            overflow: 0,
            heap_cap,
        })
        .collect();
    let mut programs: Vec<Vec<Op>> = vec![Vec::new(); n as usize];
    let mut collisions = 0;
    for i in 0..inserts {
        let key: u64 = rng.gen_range(0..key_range);
        let home = (key % n as u64) as u32;
        // The inserter must be a different process; rotate over peers.
        let inserter = (home + 1 + (i % (n - 1))) % n;
        let slot = ((key / n as u64) % slots as u64) as usize;
        let value = key.wrapping_mul(2654435761).wrapping_add(1);
        let prog: &mut Vec<Op> = &mut programs[inserter as usize];
        let vol = &mut volumes[home as usize];
        if !vol.occupied[slot] {
            vol.occupied[slot] = true;
            // Free slot: the single compare-and-swap succeeds.
            prog.push(Op::Atomic {
                trg: home,
                cell: slot,
                add: value,
            });
        } else {
            collisions += 1;
            if vol.overflow >= vol.heap_cap {
                return Err(ScenarioError::Validation(format!(
                    "overflow heap of volume {home} exhausted after {} entries; \
                     enlarge the window",
                    vol.overflow
                )));
            }
            let pos = vol.overflow;
            vol.overflow += 1;
            let val_cell = heap_base + 2 * pos as usize;
            let link_cell = val_cell + 1;
            let prev_link = if pos == 0 {
                ptr_last
            } else {
                heap_base + 2 * (pos as usize - 1) + 1
            };
            // Failed CAS, then the overflow-chain insertion: exactly
            // six puts and four gets reach the logs.
            prog.push(Op::Atomic {
                trg: home,
                cell: slot,
                add: 0,
            });
            prog.push(Op::Get {
                trg: home,
                cell: ptr_last,
                blocking: true,
            });
            prog.push(Op::Atomic {
                trg: home,
                cell: ptr_free,
                add: 2,
            });
            prog.push(Op::Put {
                trg: home,
                cell: val_cell,
                value,
                combine: false,
                blocking: true,
            });
            prog.push(Op::Put {
                trg: home,
                cell: link_cell,
                value: 0,
                combine: false,
                blocking: true,
            });
            prog.push(Op::Put {
                trg: home,
                cell: prev_link,
                value: val_cell as Word,
                combine: false,
                blocking: true,
            });
            prog.push(Op::Atomic {
                trg: home,
                cell: ptr_last,
                add: 1,
            });
        }
        if mean_wait_events > 0.0 {
            // Exponential think time, quantized to idle events.
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let wait = (-u.ln() * mean_wait_events).floor() as u32;
            for _ in 0..wait.min(5) {
                prog.push(Op::Nop);
            }
        }
    }
    Ok(GeneratedWorkload {
        programs,
        meta: WorkloadMeta {
            collisions,
            inserts,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_insert_list_gives_empty_programs() {
        let spec = WorkloadSpec::Kvstore {
            inserts: 0,
            key_range: 64,
            slots: 8,
            mean_wait_events: 0.0,
        };
        let g = generate(&spec, 4, 64, 1).unwrap();
        assert!(g.programs.iter().all(Vec::is_empty));
        assert_eq!(g.meta.collisions, 0);
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed() {
        let spec = WorkloadSpec::RandomGsync {
            rounds: 3,
            puts_per_round: 2,
            gets_per_round: 1,
            epochs_per_round: 2,
            combining: true,
            local_ops: true,
        };
        let a = generate(&spec, 6, 48, 99).unwrap();
        let b = generate(&spec, 6, 48, 99).unwrap();
        assert_eq!(a.programs, b.programs);
        let c = generate(&spec, 6, 48, 100).unwrap();
        assert_ne!(a.programs, c.programs);
    }

    #[test]
    fn too_small_windows_are_rejected() {
        let spec = WorkloadSpec::RandomGsync {
            rounds: 1,
            puts_per_round: 1,
            gets_per_round: 1,
            epochs_per_round: 1,
            combining: false,
            local_ops: false,
        };
        assert!(generate(&spec, 16, 8, 1).is_err());
    }

    #[test]
    fn kvstore_heap_exhaustion_is_reported() {
        let spec = WorkloadSpec::Kvstore {
            inserts: 500,
            key_range: 1 << 20,
            slots: 4,
            mean_wait_events: 0.0,
        };
        // 4 slots + 2 pointers in a 12-word window leaves 3 heap pairs.
        assert!(generate(&spec, 2, 12, 1).is_err());
    }
}
