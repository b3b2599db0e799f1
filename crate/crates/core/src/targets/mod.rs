//! Bootstrapped value targets over recorded episodes.
//!
//! Every target has the shape `expansions · 2·r + Σ V(frontier)`. Only the
//! frontier differs between the constructions:
//!
//! * one step: the two children of the node;
//! * k steps along the trajectory: the `k + 1` open nodes left after the
//!   first `k` expansions inside the node's subtree, in the order they
//!   actually happened;
//! * k levels of the tree: every descendant exactly `k` levels down.
//!
//! Closed nodes are worth 0 and never reach a value model, so frontiers only
//! list branched nodes. Sums are taken in ascending node id order so that
//! equal frontiers give bit-identical targets.

pub mod codec;
pub mod exact;

use serde::{Deserialize, Serialize};

use crate::env::{EpisodeRecords, NodeObs};

pub use codec::{CodecError, HistogramCodec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    HlGaussCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Follow the realized trajectory inside the subtree.
    Bbmdp,
    /// Expand every descendant down to depth `k`.
    TreeMdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub k: usize,
    pub reward_per_transition: f64,
    pub loss: LossKind,
    pub kind: TargetKind,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            k: 3,
            reward_per_transition: -1.0,
            loss: LossKind::HlGaussCe,
            kind: TargetKind::Bbmdp,
        }
    }
}

/// Scalar value estimates for every candidate row of a node.
pub trait ActionValues {
    fn q_values(&self, obs: &NodeObs) -> Vec<f64>;
}

/// Bootstrap values: the online model picks the action and, when present,
/// the target model scores it.
#[derive(Clone, Copy)]
pub struct Bootstrap<'a> {
    pub online: &'a dyn ActionValues,
    pub target: Option<&'a dyn ActionValues>,
}

impl<'a> Bootstrap<'a> {
    pub fn plain(online: &'a dyn ActionValues) -> Self {
        Self { online, target: None }
    }

    pub fn node_value(&self, obs: &NodeObs) -> f64 {
        let q = self.online.q_values(obs);
        let best = argmax(&q);
        match self.target {
            Some(t) => t.q_values(obs)[best],
            None => q[best],
        }
    }
}

/// First index of the largest entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Expansions counted in a target and the branched frontier nodes it
/// bootstraps on, as record indices in ascending node id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frontier {
    pub expansions: usize,
    pub records: Vec<usize>,
}

fn sort_by_node(recs: &EpisodeRecords, mut records: Vec<usize>) -> Vec<usize> {
    records.sort_by_key(|&r| recs.records[r].node_id);
    records
}

fn children(recs: &EpisodeRecords, idx: usize) -> impl Iterator<Item = usize> + '_ {
    let r = &recs.records[idx];
    r.child_minus_record.into_iter().chain(r.child_plus_record)
}

pub fn frontier_1step(recs: &EpisodeRecords, idx: usize) -> Frontier {
    Frontier {
        expansions: 1,
        records: sort_by_node(recs, children(recs, idx).collect()),
    }
}

/// The open nodes of the subtree after its first `k` realized expansions.
/// A subtree finished in fewer expansions has an empty frontier.
pub fn frontier_kstep(recs: &EpisodeRecords, idx: usize, k: usize) -> Frontier {
    assert!(k >= 1, "k must be positive");
    // Branched descendants in expansion order; records are stored by step.
    let mut inside = vec![idx];
    let mut i = 0;
    while i < inside.len() {
        inside.extend(children(recs, inside[i]));
        i += 1;
    }
    inside.sort_unstable();
    let done = &inside[..k.min(inside.len())];
    let mut frontier: Vec<usize> = done
        .iter()
        .flat_map(|&r| children(recs, r))
        .filter(|r| !done.contains(r))
        .collect();
    frontier.dedup();
    Frontier {
        expansions: done.len(),
        records: sort_by_node(recs, frontier),
    }
}

/// All branched descendants exactly `k` levels below the node. The constant
/// counts the expansions in the levels above.
pub fn frontier_treemdp(recs: &EpisodeRecords, idx: usize, k: usize) -> Frontier {
    assert!(k >= 1, "k must be positive");
    let mut level = vec![idx];
    let mut expansions = 0;
    for _ in 0..k {
        expansions += level.len();
        level = level.iter().flat_map(|&r| children(recs, r)).collect();
    }
    Frontier {
        expansions,
        records: sort_by_node(recs, level),
    }
}

/// `expansions · 2·reward + Σ value(frontier)`, summed left to right.
pub fn backup(frontier: &Frontier, reward: f64, mut value: impl FnMut(usize) -> f64) -> f64 {
    let mut total = frontier.expansions as f64 * 2.0 * reward;
    for &r in &frontier.records {
        total += value(r);
    }
    total
}

fn bootstrapped(recs: &EpisodeRecords, frontier: &Frontier, boot: Bootstrap<'_>) -> f64 {
    backup(frontier, recs.reward_per_transition, |r| {
        boot.node_value(&recs.records[r].obs)
    })
}

pub fn target_1step(recs: &EpisodeRecords, idx: usize, boot: Bootstrap<'_>) -> f64 {
    bootstrapped(recs, &frontier_1step(recs, idx), boot)
}

pub fn target_kstep(recs: &EpisodeRecords, idx: usize, k: usize, boot: Bootstrap<'_>) -> f64 {
    bootstrapped(recs, &frontier_kstep(recs, idx, k), boot)
}

pub fn target_treemdp_kstep(recs: &EpisodeRecords, idx: usize, k: usize, boot: Bootstrap<'_>) -> f64 {
    bootstrapped(recs, &frontier_treemdp(recs, idx, k), boot)
}

/// Target of record `idx` under `config`.
pub fn target(recs: &EpisodeRecords, idx: usize, config: &TargetConfig, boot: Bootstrap<'_>) -> f64 {
    match config.kind {
        TargetKind::Bbmdp => target_kstep(recs, idx, config.k, boot),
        TargetKind::TreeMdp => target_treemdp_kstep(recs, idx, config.k, boot),
    }
}

/// First record where the two k-step constructions disagree, with both
/// targets.
pub fn divergence_witness(
    recs: &EpisodeRecords,
    k: usize,
    boot: Bootstrap<'_>,
) -> Option<(usize, f64, f64)> {
    (0..recs.records.len()).find_map(|i| {
        let a = target_kstep(recs, i, k, boot);
        let b = target_treemdp_kstep(recs, i, k, boot);
        (a.to_bits() != b.to_bits()).then_some((i, a, b))
    })
}

/// Depth of the deepest branched chain below the record, counting the
/// record itself.
pub fn branched_depth(recs: &EpisodeRecords, idx: usize) -> usize {
    1 + children(recs, idx)
        .map(|c| branched_depth(recs, c))
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnb::BranchingPolicy;
    use crate::env::{rollout, subtree_records, EnvConfig, StateKey};
    use crate::testkit::{small, tiny};
    use std::collections::HashMap;
    use std::sync::Arc;

    /// Value of each node read from a table; unknown nodes get `default`.
    struct Table(HashMap<StateKey, Vec<f64>>, f64);

    impl ActionValues for Table {
        fn q_values(&self, obs: &NodeObs) -> Vec<f64> {
            self.0
                .get(&obs.key)
                .cloned()
                .unwrap_or_else(|| vec![self.1; obs.features.len()])
        }
    }

    /// A deterministic pseudo-random function of the features.
    struct Hashed;

    impl ActionValues for Hashed {
        fn q_values(&self, obs: &NodeObs) -> Vec<f64> {
            obs.features
                .rows
                .iter()
                .map(|r| -1.0 - r.iter().enumerate().map(|(i, v)| (i as f64 + 1.3) * v.abs()).sum::<f64>())
                .collect()
        }
    }

    fn episode(kind: &str, seed: u64, reward: f64) -> EpisodeRecords {
        let config = EnvConfig { reward_per_transition: reward, ..EnvConfig::default() };
        let ep = rollout(Arc::new(tiny(kind, seed)), &BranchingPolicy::Random { seed }, config).unwrap();
        subtree_records(&ep).unwrap()
    }

    /// Realized values: every node worth minus its recorded subtree size.
    fn perfect(recs: &EpisodeRecords) -> Table {
        let mut t = HashMap::new();
        for r in &recs.records {
            let mut q = vec![f64::NEG_INFINITY; r.obs.features.len()];
            q[r.action_row()] = -(r.nodes_added_below as f64);
            t.insert(r.obs.key.clone(), q);
        }
        Table(t, 0.0)
    }

    #[test]
    fn both_children_fathomed_gives_constant() {
        for seed in 0..30 {
            let recs = episode("knapsack", seed, -1.0);
            for (i, r) in recs.records.iter().enumerate() {
                if r.fathomed_children == [true, true] {
                    assert_eq!(target_1step(&recs, i, Bootstrap::plain(&Hashed)), -2.0);
                    assert_eq!(target_kstep(&recs, i, 3, Bootstrap::plain(&Hashed)), -2.0);
                }
            }
        }
    }

    #[test]
    fn one_fathomed_child_adds_other_value() {
        let four = Table(HashMap::new(), -4.0);
        let mut seen = 0;
        for seed in 0..20 {
            let recs = episode("knapsack", seed, -1.0);
            for (i, r) in recs.records.iter().enumerate() {
                if r.fathomed_children.iter().filter(|&&f| f).count() == 1 {
                    assert_eq!(target_1step(&recs, i, Bootstrap::plain(&four)), -6.0);
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn perfect_values_reproduce_subtree_sizes() {
        for seed in 0..40 {
            let recs = episode(["setcover", "knapsack", "indset", "cauctions"][seed as usize % 4], seed, -1.0);
            let table = perfect(&recs);
            for i in 0..recs.records.len() {
                let truth = -(recs.records[i].nodes_added_below as f64);
                assert_eq!(target_1step(&recs, i, Bootstrap::plain(&table)), truth);
                for k in 1..5 {
                    assert_eq!(target_kstep(&recs, i, k, Bootstrap::plain(&table)), truth);
                    assert_eq!(target_treemdp_kstep(&recs, i, k, Bootstrap::plain(&table)), truth);
                }
            }
        }
    }

    #[test]
    fn one_step_constructions_coincide_bitwise() {
        for seed in 0..40 {
            let recs = episode("setcover", seed, -1.0);
            for i in 0..recs.records.len() {
                let boot = Bootstrap { online: &Hashed, target: Some(&Hashed) };
                let a = target_1step(&recs, i, boot);
                assert_eq!(a.to_bits(), target_kstep(&recs, i, 1, boot).to_bits());
                assert_eq!(a.to_bits(), target_treemdp_kstep(&recs, i, 1, boot).to_bits());
            }
        }
    }

    #[test]
    fn short_subtrees_are_pure_monte_carlo() {
        let recs = episode("knapsack", 3, -1.0);
        for (i, r) in recs.records.iter().enumerate() {
            let f = frontier_kstep(&recs, i, 3);
            if r.nodes_added_below / 2 <= 3 {
                assert!(f.records.is_empty());
                assert_eq!(f.expansions, r.nodes_added_below / 2);
            } else {
                assert_eq!(f.expansions, 3);
            }
        }
    }

    #[test]
    fn kstep_frontier_has_k_plus_one_nodes_counting_leaves() {
        let recs = episode("setcover", 5, -1.0);
        for i in 0..recs.records.len() {
            let f = frontier_kstep(&recs, i, 3);
            assert!(f.records.len() <= f.expansions + 1);
        }
    }

    #[test]
    fn treemdp_constant_on_two_levels() {
        // A perfect two-level tree with all grandchildren fathomed.
        let frontier = Frontier { expansions: 3, records: vec![] };
        assert_eq!(backup(&frontier, -1.0, |_| unreachable!()), -6.0);
    }

    #[test]
    fn double_q_uses_online_argmax_and_target_value() {
        struct Fixed(Vec<f64>);
        impl ActionValues for Fixed {
            fn q_values(&self, _: &NodeObs) -> Vec<f64> {
                self.0.clone()
            }
        }
        let obs = NodeObs {
            key: StateKey::new(&[], &[], 0.0),
            features: Default::default(),
        };
        let online = Fixed(vec![-5.0, -1.0, -3.0]);
        let target = Fixed(vec![-2.0, -9.0, -4.0]);
        assert_eq!(Bootstrap::plain(&online).node_value(&obs), -1.0);
        assert_eq!(Bootstrap { online: &online, target: Some(&target) }.node_value(&obs), -9.0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn kstep_and_treemdp_diverge_on_deep_trees() {
        let mut found = false;
        for seed in 0..20 {
            let config = EnvConfig { reward_per_transition: -1.0, ..EnvConfig::default() };
            let ep = rollout(Arc::new(small("setcover", seed)), &BranchingPolicy::Random { seed }, config).unwrap();
            let recs = subtree_records(&ep).unwrap();
            if divergence_witness(&recs, 3, Bootstrap::plain(&Hashed)).is_some() {
                found = true;
                break;
            }
        }
        assert!(found);
    }
}
