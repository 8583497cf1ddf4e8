//! Failure-domain hierarchies, topology-aware placement, and the
//! analytic catastrophic-failure probability model.
//!
//! A hierarchy has `h` levels of failure domains (level 1 is the
//! finest, e.g. nodes). Splitting N computing processes into g groups
//! of N/g members plus one checksum process each gives groups of size
//! |G| = N/g + 1 that tolerate one concurrent member loss. A placement
//! is t-aware at level n when no two same-group processes share a
//! domain at any level k <= n; under such a placement the conditional
//! probability that x_j concurrent failures at level j kill two group
//! members is
//!
//! ```text
//! D_j * C(|G|, 2) * C(H_j - 2, x_j - 2) / C(H_j, x_j),
//! D_j = ceil(H_j / |G|)
//! ```
//!
//! taken under the worst-case (fragmented) distribution of groups over
//! domains and clamped to one. Summing level failure probabilities
//! against these conditionals (t-aware levels) or alone (unaware
//! levels) yields the per-day catastrophic failure probability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;
use crate::machine::action::ProcessId;

/// Exponential failure density for one hierarchy level:
/// `a * exp(-lambda * x)` failures per day at concurrency `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailurePdf {
    pub a: f64,
    pub lambda: f64,
}

impl FailurePdf {
    pub fn eval(&self, x: u64) -> f64 {
        self.a * (-self.lambda * x as f64).exp()
    }
}

/// One failure-domain level: its name, element count, and fitted
/// failure distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdLevel {
    pub name: String,
    pub count: u64,
    pub pdf: FailurePdf,
}

/// A machine profile: failure-domain levels ordered finest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub name: String,
    pub levels: Vec<FdLevel>,
}

impl MachineProfile {
    /// The TSUBAME2.0 study profile: four levels with the fitted
    /// exponential coefficients (failures per day). Element counts
    /// follow the machine's layout of 1408 nodes grouped four per PSU,
    /// sixteen per edge switch and thirty-two per rack.
    pub fn tsubame2() -> Self {
        MachineProfile {
            name: "tsubame2".into(),
            levels: vec![
                FdLevel {
                    name: "node".into(),
                    count: 1408,
                    pdf: FailurePdf {
                        a: 0.30142e-2,
                        lambda: 1.3567,
                    },
                },
                FdLevel {
                    name: "psu".into(),
                    count: 352,
                    pdf: FailurePdf {
                        a: 1.1836e-4,
                        lambda: 1.4831,
                    },
                },
                FdLevel {
                    name: "switch".into(),
                    count: 88,
                    pdf: FailurePdf {
                        a: 3.9249e-5,
                        lambda: 1.5902,
                    },
                },
                FdLevel {
                    name: "rack".into(),
                    count: 44,
                    pdf: FailurePdf {
                        a: 3.2257e-5,
                        lambda: 1.5488,
                    },
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.levels.is_empty() {
            return Err(TopologyError::BadProfile("profile has no levels".into()));
        }
        for l in &self.levels {
            if l.count == 0 {
                return Err(TopologyError::BadProfile(format!(
                    "level {} has zero elements",
                    l.name
                )));
            }
            if !(l.pdf.a > 0.0) || !(l.pdf.lambda > 0.0) {
                return Err(TopologyError::BadProfile(format!(
                    "level {} needs positive pdf coefficients",
                    l.name
                )));
            }
        }
        for w in self.levels.windows(2) {
            if w[0].count < w[1].count {
                return Err(TopologyError::BadProfile(format!(
                    "level {} has fewer elements than coarser level {}",
                    w[0].name, w[1].name
                )));
            }
            if w[0].count % w[1].count != 0 {
                return Err(TopologyError::BadProfile(format!(
                    "level {} count {} is not a multiple of level {} count {}",
                    w[0].name, w[0].count, w[1].name, w[1].count
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, TopologyError> {
        let p: MachineProfile = serde_json::from_str(s)
            .map_err(|e| TopologyError::BadProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Index (1-based t-awareness level) of a named level; "none" is 0.
    pub fn level_index(&self, name: &str) -> Option<usize> {
        if name == "none" {
            return Some(0);
        }
        self.levels
            .iter()
            .position(|l| l.name == name)
            .map(|i| i + 1)
    }

    pub fn hierarchy(&self) -> FdHierarchy {
        FdHierarchy {
            levels: self
                .levels
                .iter()
                .map(|l| (l.name.clone(), l.count))
                .collect(),
        }
    }
}

/// The failure-domain tree: level names and element counts, finest
/// first, with uniform containment (each coarser element holds an equal
/// run of finer ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdHierarchy {
    pub levels: Vec<(String, u64)>,
}

impl FdHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn count(&self, level: usize) -> u64 {
        self.levels[level - 1].1
    }

    /// Element of `level` containing the given level-1 element.
    pub fn ancestor(&self, leaf: u64, level: usize) -> u64 {
        let per = self.levels[0].1 / self.levels[level - 1].1;
        leaf / per
    }
}

/// Map from processes to the failure domain they run on, stored as the
/// level-1 element; coarser assignments follow by containment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub leaf_of: Vec<u64>,
}

impl Placement {
    pub fn element(&self, hier: &FdHierarchy, p: ProcessId, level: usize) -> u64 {
        hier.ancestor(self.leaf_of[p.index()], level)
    }
}

/// Result of validating the t-awareness constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TawareResult {
    Ok,
    Violation {
        group: usize,
        level: usize,
        element: u64,
    },
}

/// Builds a placement satisfying the t-awareness constraint for all
/// levels up to `n`: members of one group land on distinct elements of
/// every level k <= n. Deterministic round-robin construction.
pub fn make_taware_placement(
    hier: &FdHierarchy,
    groups: &[Vec<ProcessId>],
    n: usize,
) -> Result<Placement, TopologyError> {
    let n_procs = groups.iter().map(Vec::len).sum::<usize>();
    let mut leaf_of = vec![0u64; n_procs];
    if n > hier.depth() {
        return Err(TopologyError::Domain(format!(
            "t-awareness level {n} exceeds hierarchy depth {}",
            hier.depth()
        )));
    }
    for (k, (name, count)) in hier.levels.iter().enumerate().take(n.max(1)) {
        if k < n {
            let need = groups.iter().map(Vec::len).max().unwrap_or(0);
            if need as u64 > *count {
                return Err(TopologyError::Infeasible {
                    level: k + 1,
                    name: name.clone(),
                    group_size: need,
                    available: *count as usize,
                });
            }
        }
    }
    // Distinctness at the coarsest constrained level implies it at all
    // finer ones, since distinct coarse elements have disjoint subtrees.
    let anchor = n.max(1);
    let anchor_count = hier.count(anchor);
    let leaves_per_anchor = hier.count(1) / anchor_count;
    if leaves_per_anchor == 0 {
        return Err(TopologyError::Domain(
            "hierarchy counts must not grow toward coarser levels".into(),
        ));
    }
    let mut usage: BTreeMap<u64, u64> = BTreeMap::new();
    for (gi, members) in groups.iter().enumerate() {
        for (k, &p) in members.iter().enumerate() {
            let elem = ((gi * members.len() + k) as u64) % anchor_count;
            let spread = usage.entry(elem).or_insert(0);
            let leaf = elem * leaves_per_anchor + (*spread % leaves_per_anchor);
            *spread += 1;
            leaf_of[p.index()] = leaf;
        }
    }
    let placement = Placement { leaf_of };
    if n > 0 {
        if let TawareResult::Violation { group, level, .. } =
            validate_taware(hier, &placement, groups, n, 1)
        {
            return Err(TopologyError::Infeasible {
                level,
                name: hier.levels[level - 1].0.clone(),
                group_size: groups[group].len(),
                available: hier.count(level) as usize,
            });
        }
    }
    Ok(placement)
}

/// Checks the quantified constraint directly: at every level k <= n, no
/// more than m same-group processes may share one element. `n = 0`
/// is vacuously satisfied.
pub fn validate_taware(
    hier: &FdHierarchy,
    placement: &Placement,
    groups: &[Vec<ProcessId>],
    n: usize,
    m: usize,
) -> TawareResult {
    for level in 1..=n.min(hier.depth()) {
        for (gi, members) in groups.iter().enumerate() {
            let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
            for &p in members {
                let e = placement.element(hier, p, level);
                let c = seen.entry(e).or_insert(0);
                *c += 1;
                if *c > m {
                    return TawareResult::Violation {
                        group: gi,
                        level,
                        element: e,
                    };
                }
            }
        }
    }
    TawareResult::Ok
}

/// Natural logs of factorials, cached up to a bound.
struct LnFactTable {
    table: Vec<f64>,
}

impl LnFactTable {
    fn new(max: u64) -> Self {
        let mut table = Vec::with_capacity(max as usize + 1);
        table.push(0.0);
        let mut acc = 0.0f64;
        for k in 1..=max {
            acc += (k as f64).ln();
            table.push(acc);
        }
        Self { table }
    }

    fn ln_choose(&self, n: u64, k: u64) -> f64 {
        if k > n {
            return f64::NEG_INFINITY;
        }
        self.table[n as usize] - self.table[k as usize] - self.table[(n - k) as usize]
    }
}

/// Conditional probability that `x_j` concurrent element failures at a
/// t-aware level of `h_j` elements are catastrophic for a group of
/// `group_size` processes (m = 1): the worst-case count of single-group
/// failure scenarios over all possible failure subsets, clamped to one.
/// Fewer than two failures cannot kill two members of one group.
pub fn p_conditional(h_j: u64, group_size: u64, x_j: u64) -> Result<f64, TopologyError> {
    if group_size < 2 {
        return Err(TopologyError::Domain(format!(
            "group size {group_size} cannot lose two members"
        )));
    }
    if h_j == 0 {
        return Err(TopologyError::Domain("level has no elements".into()));
    }
    if x_j > h_j {
        return Err(TopologyError::Domain(format!(
            "{x_j} concurrent failures exceed {h_j} elements"
        )));
    }
    if x_j < 2 {
        return Ok(0.0);
    }
    let d_j = h_j.div_ceil(group_size);
    // Binomials in log space; the counts reach the thousands.
    let lf = LnFactTable::new(h_j.max(group_size));
    let ln = (d_j as f64).ln() + lf.ln_choose(group_size, 2) + lf.ln_choose(h_j - 2, x_j - 2)
        - lf.ln_choose(h_j, x_j);
    Ok(ln.exp().clamp(0.0, 1.0))
}

/// A catastrophic-failure probability query.
#[derive(Debug, Clone)]
pub struct PcfQuery<'a> {
    pub profile: &'a MachineProfile,
    /// Computing processes (checksum processes are added per group).
    pub n_procs: u64,
    /// Number of groups; also the number of checksum processes (m = 1).
    pub groups: u64,
    /// T-awareness level: 0 = none, 1..=h = constrained up to there.
    pub t_aware_level: usize,
}

impl PcfQuery<'_> {
    pub fn group_size(&self) -> Result<u64, TopologyError> {
        if self.groups == 0 || !self.n_procs.is_multiple_of(self.groups) {
            return Err(TopologyError::GroupArithmetic {
                n: self.n_procs,
                groups: self.groups,
            });
        }
        Ok(self.n_procs / self.groups + 1)
    }
}

/// Per-day catastrophic failure probability: levels below the
/// t-awareness bound weight their failure distribution with the
/// conditional above; any failure at an unaware level is counted as
/// catastrophic outright. The sum is clamped to a probability.
pub fn p_cf(query: &PcfQuery) -> Result<f64, TopologyError> {
    query.profile.validate()?;
    let group_size = query.group_size()?;
    let h = query.profile.levels.len();
    if query.t_aware_level > h {
        return Err(TopologyError::Domain(format!(
            "t-awareness level {} exceeds hierarchy depth {h}",
            query.t_aware_level
        )));
    }
    let mut total = 0.0f64;
    for (j0, level) in query.profile.levels.iter().enumerate() {
        let aware = j0 < query.t_aware_level;
        for x in 1..=level.count {
            let p_fail = level.pdf.eval(x);
            if aware {
                total += p_fail * p_conditional(level.count, group_size, x)?;
            } else {
                total += p_fail;
            }
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Least-squares exponential fit on log-transformed counts. The
/// histogram maps a concurrent-failure count to its observed frequency;
/// empty and zero bins are ignored.
pub fn fit_pdf(histogram: &[(u64, f64)]) -> Result<FailurePdf, TopologyError> {
    let pts: Vec<(f64, f64)> = histogram
        .iter()
        .filter(|(_, y)| *y > 0.0)
        .map(|&(x, y)| (x as f64, y.ln()))
        .collect();
    let mut xs: Vec<u64> = histogram
        .iter()
        .filter(|(_, y)| *y > 0.0)
        .map(|&(x, _)| x)
        .collect();
    xs.sort_unstable();
    xs.dedup();
    if xs.len() < 2 {
        return Err(TopologyError::DegenerateFit(xs.len()));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(x, _)| x).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        return Err(TopologyError::DegenerateFit(xs.len()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Ok(FailurePdf {
        a: intercept.exp(),
        lambda: -slope,
    })
}
