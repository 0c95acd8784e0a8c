//! Decomposition of `⟨final| 𝒯ⁿ |start⟩` into alternating phase paths.
//!
//! A phase is a maximal run of steps that stay in one control sector. A path
//! is the list of basis states at which the phases begin, the last state
//! reached, and the phase durations. Different trajectories with the same
//! boundaries and durations are merged into one path.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config_space::{StateVector, SystemParams};
use crate::evolution::evolve;
use crate::operator::StepOperator;
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseKind {
    /// `c = 0`.
    #[serde(rename = "c")]
    Computation,
    /// `c = 1`.
    #[serde(rename = "a")]
    Action,
}

impl PhaseKind {
    fn of(c: u8) -> Self {
        if c == 0 { PhaseKind::Computation } else { PhaseKind::Action }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePath {
    /// Phases begun, counting an unfinished last phase.
    pub t: usize,
    /// `t + 1` basis indices: phase starts, then the final state. For `n = 0`
    /// this is just the start.
    pub boundary: Vec<usize>,
    /// Duration of each phase, summing to `n`.
    pub h: Vec<usize>,
    pub kinds: Vec<PhaseKind>,
    pub amplitude: C64,
}

impl PhasePath {
    pub fn final_state(&self) -> usize {
        *self.boundary.last().expect("paths have at least one boundary state")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub params: SystemParams,
    pub start: usize,
    pub n: usize,
    pub epsilon: f64,
    /// Paths in canonical order of `(boundary, h)`.
    pub paths: Vec<PhasePath>,
    /// `Σ |a|²` over pruned branches.
    pub discarded_mass: f64,
    /// `Σ |a|` over pruned branches; bounds the error of any final amplitude.
    pub discarded_bound: f64,
    /// Trajectory-tree nodes visited, including the root.
    pub tree_nodes: usize,
}

struct Walker<'a> {
    op: &'a StepOperator,
    n: usize,
    epsilon: f64,
    leaves: BTreeMap<(Vec<usize>, Vec<usize>), C64>,
    discarded_mass: f64,
    discarded_bound: f64,
    tree_nodes: usize,
    column: Vec<(usize, C64)>,
}

impl Walker<'_> {
    fn column(&mut self, j: usize) -> Vec<(usize, C64)> {
        if self.op.is_motionless() {
            self.column.clear();
            self.column.extend(self.op.core().column_entries(j));
            self.column.clone()
        } else {
            self.op.apply_sparse(&[(j, C64::new(1.0, 0.0))])
        }
    }

    fn walk(&mut self, state: usize, amp: C64, step: usize, boundary: &mut Vec<usize>, h: &mut Vec<usize>, run: usize) {
        self.tree_nodes += 1;
        if step == self.n {
            let mut b = boundary.clone();
            let mut hh = h.clone();
            if run > 0 {
                hh.push(run);
                b.push(state);
            } else if b.last() != Some(&state) {
                b.push(state);
            }
            *self.leaves.entry((b, hh)).or_insert(C64::new(0.0, 0.0)) += amp;
            return;
        }
        let p = *self.op.params();
        let c = p.unpack(state).3;
        for (next, t) in self.column(state) {
            let a = amp * t;
            if a.norm() < self.epsilon {
                self.discarded_mass += a.norm_sqr();
                self.discarded_bound += a.norm();
                continue;
            }
            if p.unpack(next).3 == c {
                self.walk(next, a, step + 1, boundary, h, run + 1);
            } else {
                boundary.push(next);
                h.push(run + 1);
                self.walk(next, a, step + 1, boundary, h, 0);
                h.pop();
                boundary.pop();
            }
        }
    }
}

/// Walks every trajectory of length `n` from basis state `start`, pruning
/// branches whose running amplitude falls below `epsilon`.
pub fn enumerate_phase_paths(op: &StepOperator, start: usize, n: usize, epsilon: f64) -> Result<PathSet> {
    let p = *op.params();
    if start >= p.dimension() {
        return Err(Error::IndexOutOfRange { index: start, dimension: p.dimension() });
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParams(format!("pruning threshold {epsilon} must be nonnegative")));
    }
    let mut w = Walker {
        op,
        n,
        epsilon,
        leaves: BTreeMap::new(),
        discarded_mass: 0.0,
        discarded_bound: 0.0,
        tree_nodes: 0,
        column: Vec::new(),
    };
    w.walk(start, C64::new(1.0, 0.0), 0, &mut vec![start], &mut Vec::new(), 0);
    let paths = w
        .leaves
        .into_iter()
        .filter(|(_, a)| *a != C64::new(0.0, 0.0))
        .map(|((boundary, h), amplitude)| {
            let t = h.len().max(1);
            let kinds = boundary[..t].iter().map(|&b| PhaseKind::of(p.unpack(b).3)).collect();
            PhasePath { t, boundary, h, kinds, amplitude }
        })
        .collect();
    Ok(PathSet {
        params: p,
        start,
        n,
        epsilon,
        paths,
        discarded_mass: w.discarded_mass,
        discarded_bound: w.discarded_bound,
        tree_nodes: w.tree_nodes,
    })
}

/// Largest `|Σ_paths amp − ⟨f|𝒯ⁿ|start⟩|` over final states `f`.
pub fn verify_path_sum(set: &PathSet, op: &StepOperator) -> Result<f64> {
    let p = *op.params();
    let mut psi = StateVector::zeros(p);
    psi.amplitudes_mut()[set.start] = C64::new(1.0, 0.0);
    let direct = evolve(op, &psi, set.n)?;
    Ok(path_sum_residual(set, direct.amplitudes()))
}

/// Residual of the path sum against given final amplitudes.
pub fn path_sum_residual(set: &PathSet, direct: &[C64]) -> f64 {
    let mut summed: BTreeMap<usize, C64> = BTreeMap::new();
    for path in &set.paths {
        *summed.entry(path.final_state()).or_insert(C64::new(0.0, 0.0)) += path.amplitude;
    }
    let mut worst: f64 = 0.0;
    for (i, &d) in direct.iter().enumerate() {
        let s = summed.get(&i).copied().unwrap_or(C64::new(0.0, 0.0));
        worst = worst.max((s - d).norm());
    }
    worst
}

/// `Σ_f |Σ_paths amp|²` over final states reached by surviving paths.
pub fn surviving_mass(set: &PathSet) -> f64 {
    let mut summed: BTreeMap<usize, C64> = BTreeMap::new();
    for path in &set.paths {
        *summed.entry(path.final_state()).or_insert(C64::new(0.0, 0.0)) += path.amplitude;
    }
    summed.values().map(|a| a.norm_sqr()).sum()
}

/// Fields that must agree across a phase, checked per path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundaryViolations {
    /// Computation phases whose endpoints differ in `x` or `y`.
    pub computation: usize,
    /// Action phases whose endpoints differ in `(d, s, node, o)` or `y`.
    pub action: usize,
}

pub fn boundary_violations(path: &PhasePath, params: &SystemParams) -> BoundaryViolations {
    let mut v = BoundaryViolations::default();
    if path.h.is_empty() {
        return v;
    }
    for j in 0..path.t {
        let (ya, xa, ia, _) = params.unpack(path.boundary[j]);
        let (yb, xb, ib, _) = params.unpack(path.boundary[j + 1]);
        match path.kinds[j] {
            PhaseKind::Computation => v.computation += (xa != xb || ya != yb) as usize,
            PhaseKind::Action => v.action += (ia != ib || ya != yb) as usize,
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathStatistics {
    /// Weighted distribution of the phase count `t`.
    pub t_histogram: BTreeMap<usize, f64>,
    /// `h_histograms[j]` is the weighted distribution of `h_{j+1}`.
    pub h_histograms: Vec<BTreeMap<usize, f64>>,
    pub path_count: usize,
    pub tree_nodes: usize,
    /// Weight carried by paths with a single phase.
    pub single_phase_weight: f64,
}

/// Histograms weighted by `|amplitude|²`, normalized over the path set.
pub fn path_statistics(set: &PathSet) -> Result<PathStatistics> {
    if set.paths.is_empty() {
        return Err(Error::InvalidParams("empty path set".into()));
    }
    let total: f64 = set.paths.iter().map(|p| p.amplitude.norm_sqr()).sum();
    let mut t_histogram = BTreeMap::new();
    let mut h_histograms: Vec<BTreeMap<usize, f64>> = Vec::new();
    let mut single = 0.0;
    for path in &set.paths {
        let w = path.amplitude.norm_sqr() / total;
        *t_histogram.entry(path.t).or_insert(0.0) += w;
        if path.t == 1 {
            single += w;
        }
        for (j, &h) in path.h.iter().enumerate() {
            if h_histograms.len() <= j {
                h_histograms.push(BTreeMap::new());
            }
            *h_histograms[j].entry(h).or_insert(0.0) += w;
        }
    }
    Ok(PathStatistics {
        t_histogram,
        h_histograms,
        path_count: set.paths.len(),
        tree_nodes: set.tree_nodes,
        single_phase_weight: single,
    })
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    lattice: usize,
    memory_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct PathDoc {
    t: usize,
    h: Vec<usize>,
    kinds: Vec<PhaseKind>,
    boundary: Vec<usize>,
    amp: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct PathSetDoc {
    config_hash: String,
    tool_version: String,
    params: ParamsDoc,
    start: usize,
    n: usize,
    epsilon: f64,
    discarded_mass: f64,
    discarded_bound: f64,
    tree_nodes: usize,
    paths: Vec<PathDoc>,
}

/// Writes the path dump as a JSON document.
pub fn write_paths_json(set: &PathSet, config_hash: &str, w: &mut impl Write) -> Result<()> {
    let doc = PathSetDoc {
        config_hash: config_hash.to_string(),
        tool_version: crate::TOOL_VERSION.to_string(),
        params: ParamsDoc { lattice: set.params.lattice(), memory_bits: set.params.memory_bits() },
        start: set.start,
        n: set.n,
        epsilon: set.epsilon,
        discarded_mass: set.discarded_mass,
        discarded_bound: set.discarded_bound,
        tree_nodes: set.tree_nodes,
        paths: set
            .paths
            .iter()
            .map(|p| PathDoc {
                t: p.t,
                h: p.h.clone(),
                kinds: p.kinds.clone(),
                boundary: p.boundary.clone(),
                amp: [p.amplitude.re, p.amplitude.im],
            })
            .collect(),
    };
    serde_json::to_writer_pretty(&mut *w, &doc)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads a path dump back; returns the set and its config hash.
pub fn read_paths_json(text: &str) -> Result<(PathSet, String)> {
    let doc: PathSetDoc = serde_json::from_str(text)?;
    let params = SystemParams::new(doc.params.lattice, doc.params.memory_bits)?;
    let paths = doc
        .paths
        .into_iter()
        .map(|p| PhasePath { t: p.t, boundary: p.boundary, h: p.h, kinds: p.kinds, amplitude: C64::new(p.amp[0], p.amp[1]) })
        .collect();
    Ok((
        PathSet {
            params,
            start: doc.start,
            n: doc.n,
            epsilon: doc.epsilon,
            paths,
            discarded_mass: doc.discarded_mass,
            discarded_bound: doc.discarded_bound,
            tree_nodes: doc.tree_nodes,
        },
        doc.config_hash,
    ))
}
