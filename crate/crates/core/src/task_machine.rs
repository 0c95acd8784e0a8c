//! Reversible transition table for the computation phases (`c = 0`).
//!
//! The distance-measurement task is compiled node by node:
//!
//! | node | o      | effect                                                          |
//! |------|--------|-----------------------------------------------------------------|
//! | S0   | MR1    | particle here? → F1, else → S1                                  |
//! | S1   | MR1    | `d += 1` → S2                                                   |
//! | S2   | MR1    | `d == 2^N−1` → (S0, MRINF, c=1), else → (S0, MR1, c=1)           |
//! | F1   | MR1    | `s ^= d mod 2^N` → F2                                           |
//! | F2   | MR1    | `d -= 1`; `d == −1` → (B0, DN, c=1), else → (R0, ML1, c=1)       |
//! | R0   | ML1    | `d -= 1`; `d == −1` → (B0, DN, c=1), else → (R0, ML1, c=1)       |
//! | B0   | DN     | `d -= 1`; `d == −(2^N−1)` → (S0, MLINF, c=1), else → (B0, DN, c=1) |
//! | any  | MRINF/MLINF | advance the drift clock `(node, d)` by one → c=1           |
//!
//! Rows are emitted for every internal state reachable from the task start
//! (both observation outcomes are explored at S0). The remaining internal
//! states are paired with the unused successors in index order, which makes
//! the `c = 0` block a permutation for each observation outcome. `x` and `y`
//! are never written.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::config_space::{Configuration, InternalState, Node, Output, SystemParams, NODE_COUNT};
use crate::{Error, Result};

/// Fibers `(node, o)` on which the action kernel of `o` acts.
///
/// Every `c := 1` row of the task lands in one of these; all other `(node, o)`
/// pairs are visited only with `c = 0` and their `c = 1` states idle under `T_a`.
pub fn is_action_fiber(node: Node, o: Output) -> bool {
    matches!(
        (node, o),
        (Node::S0, Output::Mr1)
            | (Node::R0, Output::Ml1)
            | (Node::B0, Output::Dn)
            | (_, Output::MrInf)
            | (_, Output::MlInf)
    )
}

/// Successor of one `c = 0` internal state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Successor {
    pub internal: usize,
    pub c: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    /// Emitted by the task rule on a reachable state.
    Task,
    /// Filled in to make the block a permutation.
    Completion,
}

/// Compiled `T_c`, indexed by observation bit and internal index.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    params: SystemParams,
    rows: [Vec<Successor>; 2],
    origin: [Vec<RowOrigin>; 2],
}

impl TransitionTable {
    /// Builds a table from explicit rows (all rows marked as task rows).
    pub fn from_rows(params: SystemParams, rows: [Vec<Successor>; 2]) -> Result<Self> {
        let n = params.internal_count();
        for r in &rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: r.len() });
            }
            if let Some(bad) = r.iter().find(|s| s.internal >= n || s.c > 1) {
                return Err(Error::OutOfRange { field: "successor", value: bad.internal as i64 });
            }
        }
        let origin = [vec![RowOrigin::Task; n], vec![RowOrigin::Task; n]];
        Ok(Self { params, rows, origin })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn successor(&self, obs: bool, internal: usize) -> Successor {
        self.rows[obs as usize][internal]
    }

    pub fn origin(&self, obs: bool, internal: usize) -> RowOrigin {
        self.origin[obs as usize][internal]
    }

    pub fn rows(&self, obs: bool) -> &[Successor] {
        &self.rows[obs as usize]
    }

    /// Overwrites one row; used to build counterexamples for the audit.
    pub fn set_successor(&mut self, obs: bool, internal: usize, succ: Successor) {
        self.rows[obs as usize][internal] = succ;
        self.origin[obs as usize][internal] = RowOrigin::Task;
    }
}

/// The task rule for one internal state, if it defines a row there.
pub fn task_rule(p: &SystemParams, st: InternalState, obs: bool) -> Option<(InternalState, u8)> {
    let dmax = p.d_max();
    let step = |node, o, d, s, c| Some((InternalState { d, s, node, o }, c));
    let InternalState { d, s, node, o } = st;
    match (node, o) {
        (Node::S0, Output::Mr1) => {
            step(if obs { Node::F1 } else { Node::S1 }, o, d, s, 0)
        }
        (Node::S1, Output::Mr1) => step(Node::S2, o, p.wrap_d(d + 1), s, 0),
        (Node::S2, Output::Mr1) => {
            if d == dmax {
                step(Node::S0, Output::MrInf, d, s, 1)
            } else {
                step(Node::S0, Output::Mr1, d, s, 1)
            }
        }
        (Node::F1, Output::Mr1) => {
            let copied = d.rem_euclid(p.s_radix() as i64) as u32;
            step(Node::F2, o, d, s ^ copied, 0)
        }
        (Node::F2, Output::Mr1) | (Node::R0, Output::Ml1) => {
            let d = p.wrap_d(d - 1);
            if d == -1 {
                step(Node::B0, Output::Dn, d, s, 1)
            } else {
                step(Node::R0, Output::Ml1, d, s, 1)
            }
        }
        (Node::B0, Output::Dn) => {
            let d = p.wrap_d(d - 1);
            if d == -dmax {
                step(Node::S0, Output::MlInf, d, s, 1)
            } else {
                step(Node::B0, Output::Dn, d, s, 1)
            }
        }
        (_, Output::MrInf | Output::MlInf) => {
            let radix = p.d_radix();
            let clock = |node: Node, d: i64| node.index() * radix + (d + dmax) as usize;
            let entry_d = if o == Output::MrInf { dmax } else { -dmax };
            let next = (clock(node, d) + 1) % (NODE_COUNT * radix);
            if next == clock(Node::S0, entry_d) {
                return None;
            }
            let node = Node::from_index(next / radix).unwrap();
            step(node, o, (next % radix) as i64 - dmax, s, 1)
        }
        _ => None,
    }
}

/// Internal states reachable from the task start under any observation record.
pub fn reachable_internal(p: &SystemParams) -> BTreeSet<usize> {
    let start = Configuration::start(0, 0).internal();
    let mut seen = BTreeSet::from([p.internal_index(start)]);
    let mut queue = VecDeque::from([start]);
    while let Some(st) = queue.pop_front() {
        for obs in [false, true] {
            if let Some((next, _)) = task_rule(p, st, obs) {
                if seen.insert(p.internal_index(next)) {
                    queue.push_back(next);
                }
            }
        }
    }
    seen
}

/// Compiles the distance-measurement task into a total transition table.
pub fn compile_task(params: SystemParams) -> TransitionTable {
    let n = params.internal_count();
    let reachable = reachable_internal(&params);
    let mut rows = [Vec::new(), Vec::new()];
    let mut origin = [Vec::new(), Vec::new()];

    for obs in [false, true] {
        let mut table: Vec<Option<Successor>> = vec![None; n];
        let mut used = vec![false; n];
        for &i in &reachable {
            if let Some((next, c)) = task_rule(&params, params.internal_state(i), obs) {
                let t = params.internal_index(next);
                table[i] = Some(Successor { internal: t, c });
                used[t] = true;
            }
        }
        let free_sources: Vec<usize> = (0..n).filter(|&i| table[i].is_none()).collect();
        let mut free_targets = (0..n).filter(|&t| !used[t]);
        let ob = obs as usize;
        origin[ob] = table
            .iter()
            .map(|r| if r.is_some() { RowOrigin::Task } else { RowOrigin::Completion })
            .collect();
        for i in free_sources {
            // Only a colliding rule set can exhaust the targets first.
            let t = free_targets.next().unwrap_or(i);
            let st = params.internal_state(t);
            table[i] = Some(Successor { internal: t, c: is_action_fiber(st.node, st.o) as u8 });
        }
        rows[ob] = table.into_iter().map(Option::unwrap).collect();
    }
    TransitionTable { params, rows, origin }
}

/// Applies one computation step to a `c = 0` configuration.
pub fn tc_step(cfg: &Configuration, table: &TransitionTable) -> Result<Configuration> {
    if cfg.c != 0 {
        return Err(Error::ControlSector);
    }
    let p = table.params();
    cfg.validate(p)?;
    let succ = table.successor(cfg.x == cfg.y, p.internal_index(cfg.internal()));
    let mut next = cfg.with_internal(p.internal_state(succ.internal));
    next.c = succ.c;
    Ok(next)
}

/// Two internal states that share a successor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Collision {
    pub obs: bool,
    pub first: InternalState,
    pub second: InternalState,
    pub successor: InternalState,
    pub successor_c: u8,
    /// Number of `(x, y)` pairs on which this collision occurs.
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectivityReport {
    pub pairs_checked: usize,
    pub rows_checked: usize,
    pub collisions: Vec<Collision>,
}

impl InjectivityReport {
    pub fn is_injective(&self) -> bool {
        self.collisions.is_empty()
    }
}

/// Checks, for every `(x, y)`, that `(node, o, d, s) ↦ successor` is injective.
pub fn audit_injectivity(table: &TransitionTable) -> InjectivityReport {
    let p = table.params();
    let l = p.lattice();
    let n = p.internal_count();
    let mut per_obs: [Vec<(usize, usize, Successor)>; 2] = [Vec::new(), Vec::new()];
    for obs in [false, true] {
        let mut first_seen: BTreeMap<Successor, usize> = BTreeMap::new();
        for (i, succ) in table.rows(obs).iter().enumerate() {
            if let Some(&j) = first_seen.get(succ) {
                per_obs[obs as usize].push((j, i, *succ));
            } else {
                first_seen.insert(*succ, i);
            }
        }
    }
    let mut counts = [0usize; 2];
    for y in 0..l {
        for x in 0..l {
            counts[(x == y) as usize] += 1;
        }
    }
    let collisions = [false, true]
        .into_iter()
        .flat_map(|obs| {
            let pairs = counts[obs as usize];
            per_obs[obs as usize].iter().filter(move |_| pairs > 0).map(move |&(a, b, s)| {
                Collision {
                    obs,
                    first: p.internal_state(a),
                    second: p.internal_state(b),
                    successor: p.internal_state(s.internal),
                    successor_c: s.c,
                    pairs,
                }
            })
        })
        .collect();
    InjectivityReport { pairs_checked: l * l, rows_checked: l * l * n, collisions }
}
