//! Branch-and-bound search trees, node selection, branching rules and full
//! solves.
//!
//! Children are classified as soon as they are created (their LP is solved
//! immediately), so the open set only ever holds nodes that can be branched
//! on. When the incumbent improves, open nodes it dominates are closed at
//! once.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::lp::{self, LpError, LpResult, LpStatus, EPS_FEAS, EPS_INT};
use crate::milp::{self, Assignment, BoundChange, MilpInstance};

pub type NodeId = usize;

/// Floor for each factor of a product score.
pub const EPS_SB: f64 = 1e-4;
/// Objective gain assigned to an infeasible child.
pub const BIG: f64 = 1e8;
/// Observations per direction before a pseudocost is trusted.
pub const RELIABILITY: u32 = 4;
pub const DEFAULT_MAX_NODES: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BnbError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("LP relaxation is unbounded")]
    UnboundedRelaxation,
    #[error("node {0} is not open")]
    NodeNotOpen(NodeId),
    #[error("variable {var} is not a fractional candidate at node {node}")]
    NotACandidate { node: NodeId, var: usize },
    #[error("open set is empty")]
    EmptyOpenSet,
    #[error("instance is invalid: {0}")]
    InvalidInstance(String),
    #[error("branching rule failed: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeStatus {
    Open,
    PrunedInfeasible,
    PrunedByBound,
    PrunedIntegral,
    Branched,
}

impl NodeStatus {
    pub fn is_pruned(self) -> bool {
        matches!(
            self,
            NodeStatus::PrunedInfeasible | NodeStatus::PrunedByBound | NodeStatus::PrunedIntegral
        )
    }
}

#[derive(Debug, Clone)]
pub struct BnbNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Every refinement applied on the path from the root.
    pub bound_changes: Vec<BoundChange>,
    pub lp: LpResult,
    pub status: NodeStatus,
    pub depth: usize,
    /// First state index in which the node exists.
    pub created_at: usize,
    /// Transition during which the node left the open set.
    pub closed_at: Option<usize>,
    pub selected_at: Option<usize>,
    /// GUB when the node was selected (`+inf` without incumbent).
    pub incumbent_at_selection: Option<f64>,
    pub branch_var: Option<usize>,
    /// `(minus, plus)` children once branched.
    pub children: Option<(NodeId, NodeId)>,
    /// Nodes added below this one, filled after the solve.
    pub subtree_nodes_added: Option<usize>,
}

impl BnbNode {
    pub fn objective(&self) -> Option<f64> {
        self.lp.objective
    }

    /// Whether the node is in the open set of state `t`.
    pub fn open_at(&self, t: usize) -> bool {
        self.created_at <= t && self.closed_at.is_none_or(|c| t <= c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SelectionKind {
    Dfs,
    Bfs,
    BestBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChildOrder {
    MinusFirst,
    PlusFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodeSelectionPolicy {
    pub kind: SelectionKind,
    pub dfs_child_order: ChildOrder,
}

impl NodeSelectionPolicy {
    pub const DFS: Self = Self::new(SelectionKind::Dfs);
    pub const BFS: Self = Self::new(SelectionKind::Bfs);
    pub const BEST_BOUND: Self = Self::new(SelectionKind::BestBound);

    pub const fn new(kind: SelectionKind) -> Self {
        Self {
            kind,
            dfs_child_order: ChildOrder::MinusFirst,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SelectionKind::Dfs => "dfs",
            SelectionKind::Bfs => "bfs",
            SelectionKind::BestBound => "best-bound",
        }
    }
}

impl Default for NodeSelectionPolicy {
    fn default() -> Self {
        Self::DFS
    }
}

/// The full state of a solve: nodes, open set, incumbent and step counter.
#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<BnbNode>,
    pub open: VecDeque<NodeId>,
    pub incumbent: Option<Assignment>,
    pub gub: f64,
    pub root_instance: Arc<MilpInstance>,
    pub step: usize,
    pub selection: NodeSelectionPolicy,
}

/// Whether a relaxation value cannot beat the incumbent value `gub`. Ties
/// count as dominated.
pub fn dominated(objective: f64, gub: f64) -> bool {
    gub.is_finite() && objective >= gub - EPS_FEAS * (1.0 + gub.abs())
}

/// Status of a freshly solved node against incumbent value `gub`, plus the
/// integral point it carries when pruned by integrality. The point has its
/// integer components rounded and its objective recomputed.
pub fn classify_relaxation(
    inst: &MilpInstance,
    lp: &LpResult,
    gub: f64,
) -> Result<(NodeStatus, Option<Assignment>), BnbError> {
    match lp.status {
        LpStatus::Infeasible => Ok((NodeStatus::PrunedInfeasible, None)),
        LpStatus::Unbounded => Err(BnbError::UnboundedRelaxation),
        LpStatus::Optimal => {
            let obj = lp.objective.expect("optimal LP has an objective");
            if dominated(obj, gub) {
                return Ok((NodeStatus::PrunedByBound, None));
            }
            if lp::is_integral(lp, inst)? {
                let mut values = lp.point.clone().expect("optimal LP has a point");
                for &j in &inst.integer {
                    values[j] = values[j].round();
                }
                Ok((NodeStatus::PrunedIntegral, Some(Assignment::new(inst, values))))
            } else {
                Ok((NodeStatus::Open, None))
            }
        }
    }
}

/// Builds the single-node tree of `instance` under the default DFS policy.
pub fn init_tree(instance: &MilpInstance) -> Result<SearchTree, BnbError> {
    SearchTree::new(Arc::new(instance.clone()), NodeSelectionPolicy::default())
}

impl SearchTree {
    pub fn new(
        instance: Arc<MilpInstance>,
        selection: NodeSelectionPolicy,
    ) -> Result<Self, BnbError> {
        if let Some(v) = milp::validate(&instance).first() {
            return Err(BnbError::InvalidInstance(v.to_string()));
        }
        let lp = lp::solve_relaxation(&instance)?;
        let mut tree = SearchTree {
            nodes: Vec::new(),
            open: VecDeque::new(),
            incumbent: None,
            gub: f64::INFINITY,
            root_instance: instance,
            step: 0,
            selection,
        };
        let status = tree.classify(&lp)?;
        let root = BnbNode {
            id: 0,
            parent: None,
            bound_changes: Vec::new(),
            status,
            lp,
            depth: 0,
            created_at: 0,
            closed_at: (status != NodeStatus::Open).then_some(0),
            selected_at: None,
            incumbent_at_selection: None,
            branch_var: None,
            children: None,
            subtree_nodes_added: None,
        };
        tree.nodes.push(root);
        if status == NodeStatus::Open {
            tree.open.push_back(0);
        }
        Ok(tree)
    }

    pub fn instance(&self) -> &MilpInstance {
        &self.root_instance
    }

    pub fn node(&self, id: NodeId) -> &BnbNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_terminal(&self) -> bool {
        self.open.is_empty()
    }

    pub fn root_objective(&self) -> Option<f64> {
        self.nodes[0].objective()
    }

    /// Effective `(lower, upper)` bounds of a node.
    pub fn node_bounds(&self, id: NodeId) -> (Vec<f64>, Vec<f64>) {
        let inst = self.instance();
        let mut lower = inst.lower.clone();
        let mut upper = inst.upper.clone();
        for &change in &self.nodes[id].bound_changes {
            milp::tighten(&mut lower, &mut upper, change).expect("bound change in range");
        }
        (lower, upper)
    }

    /// Smallest LP bound among open nodes, `+inf` when none are open.
    pub fn best_open_bound(&self) -> f64 {
        self.open
            .iter()
            .filter_map(|&id| self.nodes[id].objective())
            .fold(f64::INFINITY, f64::min)
    }

    fn dominated(&self, objective: f64) -> bool {
        dominated(objective, self.gub)
    }

    /// Prunes by infeasibility, bound, or integrality; records improving incumbents.
    fn classify(&mut self, lp: &LpResult) -> Result<NodeStatus, BnbError> {
        let (status, found) = classify_relaxation(&self.root_instance, lp, self.gub)?;
        if let Some(candidate) = found {
            if candidate.objective_value < self.gub {
                self.gub = candidate.objective_value;
                self.incumbent = Some(candidate);
            }
        }
        Ok(status)
    }

    fn require_open(&self, id: NodeId) -> Result<&BnbNode, BnbError> {
        match self.nodes.get(id) {
            Some(node) if node.status == NodeStatus::Open => Ok(node),
            _ => Err(BnbError::NodeNotOpen(id)),
        }
    }

    /// Integer variables with fractional LP value at an open node, ascending.
    pub fn fractional_candidates(&self, id: NodeId) -> Result<Vec<usize>, BnbError> {
        let node = self.require_open(id)?;
        let x = node.lp.point.as_ref().expect("open node has an LP point");
        Ok(self
            .instance()
            .integer
            .iter()
            .copied()
            .filter(|&j| (x[j] - x[j].round()).abs() > EPS_INT)
            .collect())
    }

    /// `ρ(s)`: the next node to branch on. Records the selection step and GUB.
    pub fn select_node(&mut self) -> Result<NodeId, BnbError> {
        let id = self.peek_node().ok_or(BnbError::EmptyOpenSet)?;
        let node = &mut self.nodes[id];
        node.selected_at = Some(self.step);
        node.incumbent_at_selection = Some(self.gub);
        Ok(id)
    }

    /// The node `select_node` would return, without recording anything.
    pub fn peek_node(&self) -> Option<NodeId> {
        match self.selection.kind {
            SelectionKind::Dfs => self.open.back().copied(),
            SelectionKind::Bfs => self.open.front().copied(),
            SelectionKind::BestBound => self.open.iter().copied().min_by(|&a, &b| {
                let (oa, ob) = (self.nodes[a].objective(), self.nodes[b].objective());
                oa.unwrap_or(f64::INFINITY)
                    .total_cmp(&ob.unwrap_or(f64::INFINITY))
                    .then(a.cmp(&b))
            }),
        }
    }

    /// Child bounds and LP results for branching `var` at `id`, without
    /// touching the tree.
    pub fn child_relaxations(
        &self,
        id: NodeId,
        var: usize,
    ) -> Result<[(BoundChange, LpResult); 2], BnbError> {
        let node = &self.nodes[id];
        let x_hat = node.lp.point.as_ref().expect("open node has an LP point")[var];
        let (lower, upper) = self.node_bounds(id);
        let minus = BoundChange::upper(var, x_hat.floor());
        let plus = BoundChange::lower(var, x_hat.ceil());
        let solve = |change: BoundChange| -> Result<LpResult, BnbError> {
            let (mut l, mut u) = (lower.clone(), upper.clone());
            milp::tighten(&mut l, &mut u, change).expect("branch var in range");
            Ok(lp::solve_with_bounds(self.instance(), &l, &u)?)
        };
        Ok([(minus, solve(minus)?), (plus, solve(plus)?)])
    }

    /// `κ_ρ`: branches `var` at open node `id`, creating and classifying both
    /// children. Returns `(minus, plus)`.
    pub fn expand(&mut self, id: NodeId, var: usize) -> Result<(NodeId, NodeId), BnbError> {
        if !self.fractional_candidates(id)?.contains(&var) {
            return Err(BnbError::NotACandidate { node: id, var });
        }
        let children = self.child_relaxations(id, var)?;
        let t = self.step;
        let pos = self
            .open
            .iter()
            .position(|&o| o == id)
            .expect("open node is in the open set");
        self.open.remove(pos);
        let gub_before = self.gub;

        let mut ids = [0; 2];
        let mut statuses = [NodeStatus::Open; 2];
        for (k, (change, lp)) in children.into_iter().enumerate() {
            let status = self.classify(&lp)?;
            let parent = &self.nodes[id];
            let mut bound_changes = parent.bound_changes.clone();
            bound_changes.push(change);
            let child = BnbNode {
                id: self.nodes.len(),
                parent: Some(id),
                bound_changes,
                lp,
                status,
                depth: parent.depth + 1,
                created_at: t + 1,
                closed_at: (status != NodeStatus::Open).then_some(t),
                selected_at: None,
                incumbent_at_selection: None,
                branch_var: None,
                children: None,
                subtree_nodes_added: None,
            };
            ids[k] = child.id;
            statuses[k] = status;
            self.nodes.push(child);
        }
        let node = &mut self.nodes[id];
        node.status = NodeStatus::Branched;
        node.closed_at = Some(t);
        node.branch_var = Some(var);
        node.children = Some((ids[0], ids[1]));

        let order = match (self.selection.kind, self.selection.dfs_child_order) {
            // A stack pops the last push first.
            (SelectionKind::Dfs, ChildOrder::MinusFirst) => [ids[1], ids[0]],
            (SelectionKind::Dfs, ChildOrder::PlusFirst) => [ids[0], ids[1]],
            (_, ChildOrder::MinusFirst) => [ids[0], ids[1]],
            (_, ChildOrder::PlusFirst) => [ids[1], ids[0]],
        };
        for child in order {
            if self.nodes[child].status == NodeStatus::Open {
                self.open.push_back(child);
            }
        }
        if self.gub < gub_before {
            self.prune_dominated(t);
        }
        self.step += 1;
        Ok((ids[0], ids[1]))
    }

    fn prune_dominated(&mut self, t: usize) {
        let mut keep = VecDeque::with_capacity(self.open.len());
        while let Some(id) = self.open.pop_front() {
            let obj = self.nodes[id].objective().expect("open node is optimal");
            if self.dominated(obj) {
                let node = &mut self.nodes[id];
                node.status = NodeStatus::PrunedByBound;
                node.closed_at = Some(t);
            } else {
                keep.push_back(id);
            }
        }
        self.open = keep;
    }

    /// Fills `subtree_nodes_added` bottom-up; children always have larger ids.
    pub fn fill_subtree_sizes(&mut self) {
        for id in (0..self.nodes.len()).rev() {
            let added = match self.nodes[id].children {
                Some((a, b)) => {
                    2 + self.nodes[a].subtree_nodes_added.unwrap_or(0)
                        + self.nodes[b].subtree_nodes_added.unwrap_or(0)
                }
                None => 0,
            };
            self.nodes[id].subtree_nodes_added = Some(added);
        }
    }

    /// Nodes of `T(id)` in id order, including `id`.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            if let Some((a, b)) = self.nodes[out[i]].children {
                out.push(a);
                out.push(b);
            }
            i += 1;
        }
        out.sort_unstable();
        out
    }
}

/// Per-candidate strong branching product scores at an open node. Child
/// solves here leave the tree untouched.
pub fn strong_branching_scores(
    tree: &SearchTree,
    id: NodeId,
) -> Result<Vec<(usize, f64)>, BnbError> {
    let candidates = tree.fractional_candidates(id)?;
    candidates
        .into_iter()
        .map(|var| Ok((var, strong_branching_score(tree, id, var)?)))
        .collect()
}

fn strong_branching_score(tree: &SearchTree, id: NodeId, var: usize) -> Result<f64, BnbError> {
    let parent = tree.nodes[id].objective().expect("open node is optimal");
    let [(_, minus), (_, plus)] = tree.child_relaxations(id, var)?;
    let gain = |lp: &LpResult| match lp.objective {
        Some(obj) => obj - parent,
        None => BIG,
    };
    Ok(product_score(gain(&minus), gain(&plus)))
}

pub fn product_score(down: f64, up: f64) -> f64 {
    down.max(EPS_SB) * up.max(EPS_SB)
}

/// Running per-variable averages of objective gain per unit of fractionality.
#[derive(Debug, Clone, Default)]
pub struct PseudocostStats {
    down_sum: Vec<f64>,
    down_count: Vec<u32>,
    up_sum: Vec<f64>,
    up_count: Vec<u32>,
}

impl PseudocostStats {
    pub fn new(num_vars: usize) -> Self {
        Self {
            down_sum: vec![0.0; num_vars],
            down_count: vec![0; num_vars],
            up_sum: vec![0.0; num_vars],
            up_count: vec![0; num_vars],
        }
    }

    pub fn record_down(&mut self, var: usize, gain_per_unit: f64) {
        self.down_sum[var] += gain_per_unit;
        self.down_count[var] += 1;
    }

    pub fn record_up(&mut self, var: usize, gain_per_unit: f64) {
        self.up_sum[var] += gain_per_unit;
        self.up_count[var] += 1;
    }

    pub fn down(&self, var: usize) -> Option<f64> {
        (self.down_count[var] > 0).then(|| self.down_sum[var] / self.down_count[var] as f64)
    }

    pub fn up(&self, var: usize) -> Option<f64> {
        (self.up_count[var] > 0).then(|| self.up_sum[var] / self.up_count[var] as f64)
    }

    pub fn observations(&self, var: usize) -> (u32, u32) {
        (self.down_count[var], self.up_count[var])
    }

    pub fn is_reliable(&self, var: usize) -> bool {
        self.down_count[var] >= RELIABILITY && self.up_count[var] >= RELIABILITY
    }

    /// Records the realized gains of a branched node.
    pub fn observe(&mut self, tree: &SearchTree, id: NodeId) {
        let node = &tree.nodes[id];
        let (Some(var), Some((minus, plus)), Some(parent)) =
            (node.branch_var, node.children, node.objective())
        else {
            return;
        };
        let x_hat = node.lp.point.as_ref().expect("branched node has a point")[var];
        let down_frac = x_hat - x_hat.floor();
        let up_frac = x_hat.ceil() - x_hat;
        if let Some(obj) = tree.nodes[minus].objective() {
            self.record_down(var, (obj - parent).max(0.0) / down_frac);
        }
        if let Some(obj) = tree.nodes[plus].objective() {
            self.record_up(var, (obj - parent).max(0.0) / up_frac);
        }
    }
}

/// Reliability pseudocost rule: estimated product scores for reliable
/// variables, strong branching scores otherwise. Ties go to the lowest index.
pub fn pseudocost_branch(
    tree: &SearchTree,
    id: NodeId,
    stats: &PseudocostStats,
) -> Result<usize, BnbError> {
    let x = tree.nodes[id].lp.point.clone().expect("open node has a point");
    let mut best: Option<(usize, f64)> = None;
    for var in tree.fractional_candidates(id)? {
        let score = if stats.is_reliable(var) {
            let down = (x[var] - x[var].floor()) * stats.down(var).unwrap_or(0.0);
            let up = (x[var].ceil() - x[var]) * stats.up(var).unwrap_or(0.0);
            product_score(down, up)
        } else {
            strong_branching_score(tree, id, var)?
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((var, score));
        }
    }
    best.map(|(v, _)| v).ok_or(BnbError::NodeNotOpen(id))
}

/// Scores candidates from outside the engine, e.g. a learned value model.
/// The highest score wins, ties by lowest variable index.
pub trait CandidateScorer: Send + Sync {
    fn scores(&self, tree: &SearchTree, id: NodeId, candidates: &[usize]) -> Vec<f64>;
    fn name(&self) -> String;
}

/// Branching rule `π`, as configuration.
#[derive(Clone)]
pub enum BranchingPolicy {
    Random { seed: u64 },
    MostFractional,
    StrongBranching,
    Pseudocost,
    Learned(Arc<dyn CandidateScorer>),
}

impl std::fmt::Debug for BranchingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl BranchingPolicy {
    pub fn name(&self) -> String {
        match self {
            BranchingPolicy::Random { .. } => "random".into(),
            BranchingPolicy::MostFractional => "most-fractional".into(),
            BranchingPolicy::StrongBranching => "strong-branching".into(),
            BranchingPolicy::Pseudocost => "pseudocost".into(),
            BranchingPolicy::Learned(s) => s.name(),
        }
    }

    /// A fresh stateful rule for one solve.
    pub fn brancher(&self, num_vars: usize) -> Box<dyn Brancher> {
        match self {
            BranchingPolicy::Random { seed } => Box::new(RandomBrancher {
                rng: ChaCha8Rng::seed_from_u64(*seed),
            }),
            BranchingPolicy::MostFractional => Box::new(MostFractional),
            BranchingPolicy::StrongBranching => Box::new(StrongBranching),
            BranchingPolicy::Pseudocost => Box::new(PseudocostBrancher {
                stats: PseudocostStats::new(num_vars),
            }),
            BranchingPolicy::Learned(scorer) => Box::new(ScoredBrancher(Arc::clone(scorer))),
        }
    }
}

/// A stateful branching rule driving one solve.
pub trait Brancher {
    /// Picks one of `candidates` (nonempty, ascending) at open node `id`.
    fn choose(
        &mut self,
        tree: &SearchTree,
        id: NodeId,
        candidates: &[usize],
    ) -> Result<usize, BnbError>;

    /// Called after `id` has been branched.
    fn observe(&mut self, _tree: &SearchTree, _id: NodeId) {}
}

struct RandomBrancher {
    rng: ChaCha8Rng,
}

impl Brancher for RandomBrancher {
    fn choose(&mut self, _: &SearchTree, _: NodeId, candidates: &[usize]) -> Result<usize, BnbError> {
        Ok(candidates[self.rng.random_range(0..candidates.len())])
    }
}

struct MostFractional;

impl Brancher for MostFractional {
    fn choose(&mut self, tree: &SearchTree, id: NodeId, candidates: &[usize]) -> Result<usize, BnbError> {
        let x = tree.nodes[id].lp.point.as_ref().expect("open node has a point");
        let frac = |j: usize| (x[j] - x[j].round()).abs();
        Ok(argmax_first(candidates, frac))
    }
}

struct StrongBranching;

impl Brancher for StrongBranching {
    fn choose(&mut self, tree: &SearchTree, id: NodeId, _: &[usize]) -> Result<usize, BnbError> {
        let scores = strong_branching_scores(tree, id)?;
        let best = scores
            .iter()
            .fold(None::<(usize, f64)>, |best, &(v, s)| match best {
                Some((_, b)) if s <= b => best,
                _ => Some((v, s)),
            });
        best.map(|(v, _)| v).ok_or(BnbError::NodeNotOpen(id))
    }
}

struct PseudocostBrancher {
    stats: PseudocostStats,
}

impl Brancher for PseudocostBrancher {
    fn choose(&mut self, tree: &SearchTree, id: NodeId, _: &[usize]) -> Result<usize, BnbError> {
        pseudocost_branch(tree, id, &self.stats)
    }

    fn observe(&mut self, tree: &SearchTree, id: NodeId) {
        self.stats.observe(tree, id);
    }
}

struct ScoredBrancher(Arc<dyn CandidateScorer>);

impl Brancher for ScoredBrancher {
    fn choose(&mut self, tree: &SearchTree, id: NodeId, candidates: &[usize]) -> Result<usize, BnbError> {
        let scores = self.0.scores(tree, id, candidates);
        Ok(argmax_first(candidates, |j| {
            scores[candidates.iter().position(|&c| c == j).unwrap()]
        }))
    }
}

/// First element maximizing `score`.
pub fn argmax_first(candidates: &[usize], score: impl Fn(usize) -> f64) -> usize {
    let mut best = candidates[0];
    let mut best_score = score(best);
    for &c in &candidates[1..] {
        let s = score(c);
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Limits {
    pub max_nodes: usize,
    pub max_steps: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_nodes: DEFAULT_MAX_NODES,
            max_steps: usize::MAX,
        }
    }
}

impl Limits {
    /// Whether one more transition is allowed from `tree`.
    pub fn allows_step(&self, tree: &SearchTree) -> bool {
        tree.step < self.max_steps && tree.node_count() + 2 <= self.max_nodes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    LimitReached,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub objective: Option<f64>,
    pub incumbent: Option<Assignment>,
    pub node_count: usize,
    pub step_count: usize,
    pub status: SolveStatus,
    pub seconds: f64,
    pub tree: SearchTree,
}

/// Runs B&B to completion or to `limits` with branching rule `brancher`.
pub fn solve_with(
    instance: Arc<MilpInstance>,
    brancher: &mut dyn Brancher,
    selection: NodeSelectionPolicy,
    limits: Limits,
) -> Result<SolveReport, BnbError> {
    let start = Instant::now();
    let mut tree = SearchTree::new(instance, selection)?;
    let mut status = SolveStatus::Optimal;
    while !tree.is_terminal() {
        if !limits.allows_step(&tree) {
            status = SolveStatus::LimitReached;
            break;
        }
        let id = tree.select_node()?;
        let candidates = tree.fractional_candidates(id)?;
        let var = brancher.choose(&tree, id, &candidates)?;
        tree.expand(id, var)?;
        brancher.observe(&tree, id);
    }
    tree.fill_subtree_sizes();
    Ok(SolveReport {
        objective: tree.incumbent.as_ref().map(|a| a.objective_value),
        incumbent: tree.incumbent.clone(),
        node_count: tree.node_count(),
        step_count: tree.step,
        status,
        seconds: start.elapsed().as_secs_f64(),
        tree,
    })
}

pub fn solve(
    instance: &MilpInstance,
    branching: &BranchingPolicy,
    selection: NodeSelectionPolicy,
    limits: Limits,
) -> Result<SolveReport, BnbError> {
    let mut brancher = branching.brancher(instance.num_vars);
    solve_with(Arc::new(instance.clone()), brancher.as_mut(), selection, limits)
}
