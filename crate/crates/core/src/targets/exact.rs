//! Exact action values on instances small enough to enumerate every
//! branching decision under depth-first selection.
//!
//! A state is a node's bounds plus the incumbent value when it is selected.
//! Under depth-first selection the incumbent handed to the plus child only
//! depends on the optimum of the minus child's sub-problem, so the states
//! form a finite DAG and value iteration with the one-step backup is exact.

use std::collections::HashMap;
use std::sync::Arc;

use crate::bnb::{
    self, classify_relaxation, dominated, BnbError, Brancher, BranchingPolicy, Limits, NodeId,
    NodeSelectionPolicy, NodeStatus, SearchTree,
};
use crate::env::StateKey;
use crate::lp::{self, LpResult, EPS_FEAS, EPS_INT};
use crate::milp::{self, BoundChange, MilpInstance};

struct State {
    key: StateKey,
    /// `(var, [minus, plus])` with open children as state indices.
    actions: Vec<(usize, [Option<usize>; 2])>,
}

/// Tabular action values of every reachable state.
#[derive(Debug, Clone)]
pub struct ExactValues {
    pub q: HashMap<StateKey, Vec<(usize, f64)>>,
    pub iterations: usize,
    /// Max-norm change of the last sweep.
    pub residual: f64,
    /// Optimal value of the root state, 0 when the root is closed.
    pub root_value: f64,
    pub states: usize,
}

struct Builder<'a> {
    inst: &'a MilpInstance,
    states: Vec<State>,
    index: HashMap<StateKey, usize>,
    optima: HashMap<StateKey, f64>,
}

impl Builder<'_> {
    /// Best objective of the sub-problem inside `[lower, upper]`.
    fn optimum(&mut self, lower: &[f64], upper: &[f64]) -> Result<f64, BnbError> {
        let key = StateKey::new(lower, upper, 0.0);
        if let Some(&v) = self.optima.get(&key) {
            return Ok(v);
        }
        let mut sub = self.inst.clone();
        sub.lower = lower.to_vec();
        sub.upper = upper.to_vec();
        let report = bnb::solve(
            &sub,
            &BranchingPolicy::MostFractional,
            NodeSelectionPolicy::DFS,
            Limits::default(),
        )?;
        let v = report.objective.unwrap_or(f64::INFINITY);
        self.optima.insert(key, v);
        Ok(v)
    }

    fn visit(&mut self, lower: Vec<f64>, upper: Vec<f64>, lp: LpResult, gub: f64) -> Result<usize, BnbError> {
        let key = StateKey::new(&lower, &upper, gub);
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let x = lp.point.clone().expect("open state has an LP point");
        let candidates: Vec<usize> = self
            .inst
            .integer
            .iter()
            .copied()
            .filter(|&j| (x[j] - x[j].round()).abs() > EPS_INT)
            .collect();
        let mut actions = Vec::with_capacity(candidates.len());
        for var in candidates {
            actions.push((var, self.children(&lower, &upper, &x, gub, var)?));
        }
        let i = self.states.len();
        self.states.push(State { key: key.clone(), actions });
        self.index.insert(key, i);
        Ok(i)
    }

    /// Mirrors one expansion of the engine followed by depth-first
    /// processing of the minus subtree.
    fn children(
        &mut self,
        lower: &[f64],
        upper: &[f64],
        x: &[f64],
        gub: f64,
        var: usize,
    ) -> Result<[Option<usize>; 2], BnbError> {
        let side = |change: BoundChange| {
            let (mut l, mut u) = (lower.to_vec(), upper.to_vec());
            milp::tighten(&mut l, &mut u, change).expect("var in range");
            (l, u)
        };
        let (lm, um) = side(BoundChange::upper(var, x[var].floor()));
        let (lp_, up) = side(BoundChange::lower(var, x[var].ceil()));
        let minus = lp::solve_with_bounds(self.inst, &lm, &um)?;
        let plus = lp::solve_with_bounds(self.inst, &lp_, &up)?;

        let mut g = gub;
        let (minus_status, found) = classify_relaxation(self.inst, &minus, g)?;
        if let Some(a) = found {
            g = g.min(a.objective_value);
        }
        let (plus_status, found) = classify_relaxation(self.inst, &plus, g)?;
        if let Some(a) = found {
            g = g.min(a.objective_value);
        }
        let open = |status: NodeStatus, lp: &LpResult, g: f64| {
            status == NodeStatus::Open && !dominated(lp.objective.expect("optimal"), g)
        };

        let mut out = [None, None];
        let mut after_minus = g;
        if open(minus_status, &minus, g) {
            let best = self.optimum(&lm, &um)?;
            if best < g - EPS_FEAS * (1.0 + g.abs()) || !g.is_finite() {
                after_minus = after_minus.min(best);
            }
            out[0] = Some(self.visit(lm, um, minus, g)?);
        }
        if open(plus_status, &plus, after_minus) {
            out[1] = Some(self.visit(lp_, up, plus, after_minus)?);
        }
        Ok(out)
    }
}

/// Value iteration with the one-step backup `2·reward + Σ max Q(child)`.
pub fn solve_exact(inst: &MilpInstance, reward: f64) -> Result<ExactValues, BnbError> {
    let tree = SearchTree::new(Arc::new(inst.clone()), NodeSelectionPolicy::DFS)?;
    let mut b = Builder {
        inst,
        states: Vec::new(),
        index: HashMap::new(),
        optima: HashMap::new(),
    };
    let root = if tree.is_terminal() {
        None
    } else {
        Some(b.visit(
            inst.lower.clone(),
            inst.upper.clone(),
            tree.nodes[0].lp.clone(),
            f64::INFINITY,
        )?)
    };
    let states = b.states;
    let mut q: Vec<Vec<f64>> = states.iter().map(|s| vec![0.0; s.actions.len()]).collect();
    let best = |q: &[Vec<f64>], s: usize| q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while residual > 1e-9 && iterations <= states.len() + 1 {
        let next: Vec<Vec<f64>> = states
            .iter()
            .map(|s| {
                s.actions
                    .iter()
                    .map(|(_, kids)| {
                        let mut total = 2.0 * reward;
                        for c in kids.iter().flatten() {
                            total += best(&q, *c);
                        }
                        total
                    })
                    .collect()
            })
            .collect();
        residual = next
            .iter()
            .flatten()
            .zip(q.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        iterations += 1;
    }
    let root_value = root.map_or(0.0, |r| best(&q, r));
    let table = states
        .iter()
        .zip(&q)
        .map(|(s, qs)| {
            let pairs = s.actions.iter().map(|(v, _)| *v).zip(qs.iter().copied()).collect();
            (s.key.clone(), pairs)
        })
        .collect();
    Ok(ExactValues {
        q: table,
        iterations,
        residual,
        root_value,
        states: states.len(),
    })
}

/// Greedy play on a table of action values; ties go to the lowest variable.
pub struct TabularGreedy<'a>(pub &'a HashMap<StateKey, Vec<(usize, f64)>>);

impl Brancher for TabularGreedy<'_> {
    fn choose(&mut self, tree: &SearchTree, id: NodeId, _: &[usize]) -> Result<usize, BnbError> {
        let key = StateKey::of_node(tree, id, tree.gub);
        let actions = self
            .0
            .get(&key)
            .ok_or_else(|| BnbError::Policy(format!("no table entry for node {id}")))?;
        let mut best = actions[0];
        for &a in &actions[1..] {
            if a.1 > best.1 {
                best = a;
            }
        }
        Ok(best.0)
    }
}

/// Smallest and largest final tree over every sequence of branching
/// decisions under depth-first selection.
pub fn tree_size_range(inst: &MilpInstance) -> Result<(usize, usize), BnbError> {
    fn added(
        tree: &SearchTree,
        memo: &mut HashMap<(Vec<StateKey>, u64), (usize, usize)>,
    ) -> Result<(usize, usize), BnbError> {
        let Some(id) = tree.peek_node() else {
            return Ok((0, 0));
        };
        let key: Vec<StateKey> = tree
            .open
            .iter()
            .map(|&o| StateKey::of_node(tree, o, 0.0))
            .collect();
        let key = (key, tree.gub.to_bits());
        if let Some(&r) = memo.get(&key) {
            return Ok(r);
        }
        let mut range = (usize::MAX, 0);
        for var in tree.fractional_candidates(id)? {
            let mut t = tree.clone();
            t.expand(id, var)?;
            let (lo, hi) = added(&t, memo)?;
            range = (range.0.min(lo + 2), range.1.max(hi + 2));
        }
        memo.insert(key, range);
        Ok(range)
    }
    let tree = SearchTree::new(Arc::new(inst.clone()), NodeSelectionPolicy::DFS)?;
    let (lo, hi) = added(&tree, &mut HashMap::new())?;
    Ok((1 + lo, 1 + hi))
}

/// Outcome of checking greedy play on exact values against exhaustive
/// search.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactCheck {
    pub min_tree: usize,
    pub max_tree: usize,
    pub greedy_tree: usize,
    pub root_value: f64,
    pub iterations: usize,
    pub residual: f64,
    pub states: usize,
}

impl ExactCheck {
    pub fn passed(&self, reward: f64) -> bool {
        self.residual <= 1e-9
            && self.greedy_tree == self.min_tree
            && self.root_value == reward * (self.min_tree - 1) as f64
    }
}

pub fn check_instance(inst: &MilpInstance, reward: f64) -> Result<ExactCheck, BnbError> {
    let exact = solve_exact(inst, reward)?;
    let (min_tree, max_tree) = tree_size_range(inst)?;
    let greedy = bnb::solve_with(
        Arc::new(inst.clone()),
        &mut TabularGreedy(&exact.q),
        NodeSelectionPolicy::DFS,
        Limits::default(),
    )?;
    Ok(ExactCheck {
        min_tree,
        max_tree,
        greedy_tree: greedy.node_count,
        root_value: exact.root_value,
        iterations: exact.iterations,
        residual: exact.residual,
        states: exact.states,
    })
}
