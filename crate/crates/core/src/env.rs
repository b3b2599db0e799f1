//! Branching as a Markov decision process over whole search trees.
//!
//! A state is the search tree, an action is a fractional variable of the
//! focus node picked by the node selection rule, and every transition earns
//! the same negative reward. Episodes are recorded so that per-node subtree
//! sizes can be read off after the fact.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::bnb::{
    BnbError, Brancher, BranchingPolicy, Limits, NodeId, NodeSelectionPolicy, NodeStatus,
    SearchTree,
};
use crate::features::{self, FeatureMatrix};
use crate::milp::MilpInstance;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Bnb(#[from] BnbError),
    #[error("variable {var} is not a fractional candidate of the focus node")]
    Masked { var: usize },
    #[error("episode is already finished")]
    Done,
    #[error("episode was truncated by a limit")]
    Truncated,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvConfig {
    pub reward_per_transition: f64,
    pub selection: NodeSelectionPolicy,
    pub gamma: f64,
    pub limits: Limits,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            reward_per_transition: -2.0,
            selection: NodeSelectionPolicy::DFS,
            gamma: 1.0,
            limits: Limits::default(),
        }
    }
}

impl EnvConfig {
    /// Reward −1 per transition, as used for training.
    pub fn training() -> Self {
        Self {
            reward_per_transition: -1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.reward_per_transition < 0.0) {
            return Err(EnvError::InvalidConfig("reward must be negative".into()));
        }
        if self.gamma != 1.0 {
            return Err(EnvError::InvalidConfig("discount must be 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub step: usize,
    pub focus: NodeId,
    pub action: usize,
    pub reward: f64,
    /// Open nodes after the transition.
    pub open_count: usize,
    /// Incumbent value after the transition.
    pub gub: f64,
}

/// A live episode: the current tree and its focus node.
#[derive(Debug, Clone)]
pub struct Env {
    tree: SearchTree,
    config: EnvConfig,
    focus: Option<NodeId>,
    transitions: Vec<Transition>,
}

/// Starts an episode. Returns the environment and whether it is already done.
pub fn reset(instance: Arc<MilpInstance>, config: EnvConfig) -> Result<(Env, bool), EnvError> {
    config.validate()?;
    let tree = SearchTree::new(instance, config.selection)?;
    let mut env = Env {
        tree,
        config,
        focus: None,
        transitions: Vec::new(),
    };
    env.refocus()?;
    let done = env.is_done();
    Ok((env, done))
}

impl Env {
    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn focus(&self) -> Option<NodeId> {
        self.focus
    }

    pub fn is_done(&self) -> bool {
        self.tree.is_terminal()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Whether the configured limits allow another transition.
    pub fn within_limits(&self) -> bool {
        self.config.limits.allows_step(&self.tree)
    }

    /// Fractional candidates of the focus node.
    pub fn candidates(&self) -> Result<Vec<usize>, EnvError> {
        let focus = self.focus.ok_or(EnvError::Done)?;
        Ok(self.tree.fractional_candidates(focus)?)
    }

    pub fn observe(&self) -> Result<FeatureMatrix, EnvError> {
        let focus = self.focus.ok_or(EnvError::Done)?;
        Ok(features::featurize(&self.tree, focus)?)
    }

    fn refocus(&mut self) -> Result<(), EnvError> {
        self.focus = if self.tree.is_terminal() {
            None
        } else {
            Some(self.tree.select_node()?)
        };
        Ok(())
    }

    /// Branches the focus node on `action`. A masked action leaves the state
    /// untouched.
    pub fn step(&mut self, action: usize) -> Result<(f64, bool), EnvError> {
        let focus = self.focus.ok_or(EnvError::Done)?;
        if !self.tree.fractional_candidates(focus)?.contains(&action) {
            return Err(EnvError::Masked { var: action });
        }
        let step = self.tree.step;
        self.tree.expand(focus, action)?;
        let reward = self.config.reward_per_transition;
        self.transitions.push(Transition {
            step,
            focus,
            action,
            reward,
            open_count: self.tree.open.len(),
            gub: self.tree.gub,
        });
        self.refocus()?;
        Ok((reward, self.is_done()))
    }

    /// Closes the episode. Unfinished episodes are flagged as truncated.
    pub fn finish(mut self) -> Episode {
        self.tree.fill_subtree_sizes();
        let truncated = !self.tree.is_terminal();
        let total_return = self.config.reward_per_transition * self.transitions.len() as f64;
        Episode {
            instance: Arc::clone(&self.tree.root_instance),
            transitions: self.transitions,
            final_tree: self.tree,
            total_return,
            truncated,
            config: self.config,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub instance: Arc<MilpInstance>,
    pub transitions: Vec<Transition>,
    pub final_tree: SearchTree,
    pub total_return: f64,
    pub truncated: bool,
    pub config: EnvConfig,
}

impl Episode {
    pub fn step_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn node_count(&self) -> usize {
        self.final_tree.node_count()
    }
}

/// Plays `policy` until the tree is solved or a limit stops it.
pub fn rollout(
    instance: Arc<MilpInstance>,
    policy: &BranchingPolicy,
    config: EnvConfig,
) -> Result<Episode, EnvError> {
    let mut brancher = policy.brancher(instance.num_vars);
    rollout_with(instance, brancher.as_mut(), config)
}

pub fn rollout_with(
    instance: Arc<MilpInstance>,
    brancher: &mut dyn Brancher,
    config: EnvConfig,
) -> Result<Episode, EnvError> {
    let (mut env, mut done) = reset(instance, config)?;
    while !done && env.within_limits() {
        let focus = env.focus.expect("unfinished episode has a focus");
        let candidates = env.candidates()?;
        let var = brancher.choose(&env.tree, focus, &candidates)?;
        done = env.step(var)?.1;
        brancher.observe(&env.tree, focus);
    }
    Ok(env.finish())
}

/// Identity of a node's sub-problem and context: its bounds and the
/// incumbent value at selection, as raw bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub lower: Vec<u64>,
    pub upper: Vec<u64>,
    pub gub: u64,
}

impl StateKey {
    pub fn new(lower: &[f64], upper: &[f64], gub: f64) -> Self {
        Self {
            lower: lower.iter().map(|v| v.to_bits()).collect(),
            upper: upper.iter().map(|v| v.to_bits()).collect(),
            gub: gub.to_bits(),
        }
    }

    pub fn of_node(tree: &SearchTree, id: NodeId, gub: f64) -> Self {
        let (lower, upper) = tree.node_bounds(id);
        Self::new(&lower, &upper, gub)
    }
}

/// What an action-value function sees of a node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeObs {
    pub key: StateKey,
    pub features: FeatureMatrix,
}

/// The recorded fate of one branched node.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtreeRecord {
    pub node_id: NodeId,
    pub obs: NodeObs,
    pub action_taken: usize,
    /// `|T(node)| - 1`.
    pub nodes_added_below: usize,
    /// Record indices of the minus and plus children, when branched.
    pub child_minus_record: Option<usize>,
    pub child_plus_record: Option<usize>,
    /// Whether the minus and plus children were closed without branching.
    pub fathomed_children: [bool; 2],
}

impl SubtreeRecord {
    pub fn action_row(&self) -> usize {
        self.obs
            .features
            .position(self.action_taken)
            .expect("action is a candidate")
    }
}

/// Records of every branched node, ordered by selection step, plus a lookup
/// from node id.
#[derive(Debug, Clone)]
pub struct EpisodeRecords {
    pub records: Vec<SubtreeRecord>,
    pub by_node: HashMap<NodeId, usize>,
    pub reward_per_transition: f64,
}

impl EpisodeRecords {
    pub fn of_node(&self, id: NodeId) -> Option<&SubtreeRecord> {
        self.by_node.get(&id).map(|&i| &self.records[i])
    }
}

pub fn subtree_records(episode: &Episode) -> Result<EpisodeRecords, EnvError> {
    if episode.truncated {
        return Err(EnvError::Truncated);
    }
    let tree = &episode.final_tree;
    let by_node: HashMap<NodeId, usize> = episode
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| (t.focus, i))
        .collect();
    let records = episode
        .transitions
        .iter()
        .map(|t| {
            let node = &tree.nodes[t.focus];
            let (minus, plus) = node.children.expect("branched node has children");
            let gub = node.incumbent_at_selection.expect("branched node was selected");
            SubtreeRecord {
                node_id: t.focus,
                obs: NodeObs {
                    key: StateKey::of_node(tree, t.focus, gub),
                    features: features::featurize_selected(tree, t.focus),
                },
                action_taken: t.action,
                nodes_added_below: node.subtree_nodes_added.expect("sizes are filled"),
                child_minus_record: by_node.get(&minus).copied(),
                child_plus_record: by_node.get(&plus).copied(),
                fathomed_children: [
                    tree.nodes[minus].status != NodeStatus::Branched,
                    tree.nodes[plus].status != NodeStatus::Branched,
                ],
            }
        })
        .collect();
    Ok(EpisodeRecords {
        records,
        by_node,
        reward_per_transition: episode.config.reward_per_transition,
    })
}

/// First step `t` where the open nodes' recorded subtree sizes do not sum to
/// twice the number of remaining transitions, as `(t, lhs, rhs)`.
pub fn prefix_identity_violation(episode: &Episode) -> Option<(usize, usize, usize)> {
    let tree = &episode.final_tree;
    let steps = episode.step_count();
    (0..=steps).find_map(|t| {
        let lhs: usize = tree
            .nodes
            .iter()
            .filter(|n| n.open_at(t))
            .map(|n| n.subtree_nodes_added.unwrap_or(0))
            .sum();
        let rhs = 2 * (steps - t);
        (lhs != rhs).then_some((t, lhs, rhs))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChildOutcome {
    /// Branched later in the episode.
    Open(NodeId),
    /// Closed without branching.
    Terminal(NodeId),
}

impl ChildOutcome {
    pub fn id(self) -> NodeId {
        match self {
            ChildOutcome::Open(id) | ChildOutcome::Terminal(id) => id,
        }
    }
}

/// One expansion seen as a node-to-two-nodes transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TreeMdpStep {
    pub node: NodeId,
    pub action: usize,
    pub minus: ChildOutcome,
    pub plus: ChildOutcome,
}

pub fn treemdp_view(episode: &Episode) -> Vec<TreeMdpStep> {
    let tree = &episode.final_tree;
    let outcome = |id: NodeId| {
        if tree.nodes[id].status == NodeStatus::Branched {
            ChildOutcome::Open(id)
        } else {
            ChildOutcome::Terminal(id)
        }
    };
    episode
        .transitions
        .iter()
        .map(|t| {
            let (minus, plus) = tree.nodes[t.focus].children.expect("branched");
            TreeMdpStep {
                node: t.focus,
                action: t.action,
                minus: outcome(minus),
                plus: outcome(plus),
            }
        })
        .collect()
}

/// A node reached with the same sub-problem and incumbent in two episodes
/// whose subtrees nevertheless differ in size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextWitness {
    pub instance_seed: u64,
    pub node_path: Vec<crate::milp::BoundChange>,
    pub incumbent_at_selection: f64,
    pub subtree_sizes: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextReport {
    pub selection: &'static str,
    pub seeds_searched: usize,
    pub pairs_compared: usize,
    pub witness: Option<ContextWitness>,
}

/// Branches by most-fractional everywhere except inside one subtree of the
/// root, where it branches on a candidate hashed from the node bounds.
struct SplitRule {
    seed: u64,
    /// Which root child subtree gets the hashed rule; `None` for nowhere.
    hashed_side: Option<crate::milp::Direction>,
}

impl SplitRule {
    fn hashed(&self, tree: &SearchTree, id: NodeId) -> bool {
        match (self.hashed_side, tree.nodes[id].bound_changes.first()) {
            (Some(side), Some(first)) => first.direction == side,
            _ => false,
        }
    }

    /// Whether the whole subtree of `id` is branched by the shared rule.
    fn shared(&self, tree: &SearchTree, id: NodeId) -> bool {
        !tree.nodes[id].bound_changes.is_empty() && !self.hashed(tree, id)
    }
}

impl Brancher for SplitRule {
    fn choose(&mut self, tree: &SearchTree, id: NodeId, candidates: &[usize]) -> Result<usize, BnbError> {
        if self.hashed(tree, id) {
            let (lower, upper) = tree.node_bounds(id);
            let mut h = crate::gen::SplitMix64::new(self.seed);
            let mut acc = 0u64;
            for v in lower.iter().chain(&upper) {
                acc = acc.rotate_left(7) ^ v.to_bits();
                h = crate::gen::SplitMix64::new(acc ^ h.next_u64());
            }
            Ok(candidates[h.below(candidates.len() as u64) as usize])
        } else {
            let x = tree.nodes[id].lp.point.as_ref().expect("open node has a point");
            Ok(crate::bnb::argmax_first(candidates, |j| (x[j] - x[j].round()).abs()))
        }
    }
}

/// Searches seeded instances for a node whose subtree size changes with the
/// branching done in a sibling subtree, under `selection`.
///
/// For each seed, an episode using most-fractional everywhere is compared
/// with one that branches differently inside one root subtree. Only nodes on
/// the other side, where both episodes use the same rule, are compared.
pub fn bfs_context_counterexample(
    seeds: std::ops::Range<u64>,
    instance_for: impl Fn(u64) -> MilpInstance,
    selection: NodeSelectionPolicy,
) -> Result<ContextReport, EnvError> {
    use crate::milp::Direction;
    let config = EnvConfig {
        selection,
        ..EnvConfig::default()
    };
    let mut pairs = 0;
    let mut searched = 0;
    for seed in seeds {
        searched += 1;
        let inst = Arc::new(instance_for(seed));
        let mut base_rule = SplitRule { seed, hashed_side: None };
        let base = rollout_with(Arc::clone(&inst), &mut base_rule, config)?;
        if base.truncated {
            continue;
        }
        for side in [Direction::TightenUpper, Direction::TightenLower] {
            let mut rule = SplitRule { seed, hashed_side: Some(side) };
            let other = rollout_with(Arc::clone(&inst), &mut rule, config)?;
            if other.truncated {
                continue;
            }
            let index: HashMap<StateKey, NodeId> = other
                .final_tree
                .nodes
                .iter()
                .filter(|n| n.status == NodeStatus::Branched && rule.shared(&other.final_tree, n.id))
                .map(|n| {
                    let gub = n.incumbent_at_selection.expect("selected");
                    (StateKey::of_node(&other.final_tree, n.id, gub), n.id)
                })
                .collect();
            for node in base.final_tree.nodes.iter() {
                if node.status != NodeStatus::Branched || !rule.shared(&base.final_tree, node.id) {
                    continue;
                }
                let gub = node.incumbent_at_selection.expect("selected");
                let key = StateKey::of_node(&base.final_tree, node.id, gub);
                if let Some(&twin) = index.get(&key) {
                    pairs += 1;
                    let a = node.subtree_nodes_added.expect("filled");
                    let b = other.final_tree.nodes[twin].subtree_nodes_added.expect("filled");
                    if a != b {
                        return Ok(ContextReport {
                            selection: selection.name(),
                            seeds_searched: searched,
                            pairs_compared: pairs,
                            witness: Some(ContextWitness {
                                instance_seed: seed,
                                node_path: node.bound_changes.clone(),
                                incumbent_at_selection: gub,
                                subtree_sizes: (a + 1, b + 1),
                            }),
                        });
                    }
                }
            }
        }
    }
    Ok(ContextReport {
        selection: selection.name(),
        seeds_searched: searched,
        pairs_compared: pairs,
        witness: None,
    })
}
