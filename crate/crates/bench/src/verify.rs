//! Machine-checkable invariant suites with counterexample dumps.

use std::str::FromStr;
use std::sync::Arc;

use bbmdp_core::agent::qfn::{Architecture, QFunction, Sample};
use bbmdp_core::agent::ModelValues;
use bbmdp_core::bnb::{self, BranchingPolicy, Limits, NodeSelectionPolicy, NodeStatus};
use bbmdp_core::env::{self, EnvConfig, Episode, EpisodeRecords};
use bbmdp_core::features::{FeatureRow, NUM_FEATURES};
use bbmdp_core::gen::{self, Family, FamilySpec};
use bbmdp_core::milp::MilpInstance;
use bbmdp_core::targets::{
    self, branched_depth, divergence_witness, exact, target_1step, target_kstep,
    target_treemdp_kstep, Bootstrap, HistogramCodec, LossKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::evaluate::selection_name;
use crate::oracle::{brute_force_optimum, BruteForce};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Identities,
    Codec,
    Gradients,
    Oracle,
    Divergence,
    Exact,
    Context,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Identities,
        Suite::Codec,
        Suite::Gradients,
        Suite::Oracle,
        Suite::Divergence,
        Suite::Exact,
        Suite::Context,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Identities => "identities",
            Suite::Codec => "codec",
            Suite::Gradients => "gradients",
            Suite::Oracle => "oracle",
            Suite::Divergence => "divergence",
            Suite::Exact => "exact",
            Suite::Context => "context",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Value>,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String, counterexample: Option<Value>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
            counterexample,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn from_checks(suite: Suite, checks: Vec<Check>) -> Self {
        Self {
            suite,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Corpus sizes and seeds shared by the suites.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    /// Seeded DFS episodes on small set cover.
    pub episodes: usize,
    /// Depth of the k-step divergence search.
    pub k: usize,
    /// Tiny instances per family for the optimality oracle.
    pub oracle_instances: usize,
    /// Enumerable instances for the exact dynamic program.
    pub exact_instances: usize,
    /// Random points per approximator and loss in the gradient check.
    pub gradient_points: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            episodes: 100,
            k: 3,
            oracle_instances: 200,
            exact_instances: 50,
            gradient_points: 10,
            seed: 0,
        }
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let checks = match suite {
        Suite::Identities => identities(opts),
        Suite::Codec => codec(),
        Suite::Gradients => gradients(opts),
        Suite::Oracle => oracle(opts),
        Suite::Divergence => divergence(opts),
        Suite::Exact => exact_dp(opts),
        Suite::Context => context(opts),
    };
    SuiteReport::from_checks(suite, checks)
}

fn small_setcover(seed: u64) -> MilpInstance {
    let family = gen::preset_family("small", "setcover").expect("preset");
    gen::generate(&FamilySpec::new(family, seed)).expect("valid preset")
}

/// Random-policy DFS episodes on small set cover, seeds `seed..seed+n`.
pub fn dfs_corpus(opts: &VerifyOptions) -> Vec<(u64, Episode)> {
    (opts.seed..opts.seed + opts.episodes as u64)
        .map(|s| {
            let ep = env::rollout(
                Arc::new(small_setcover(s)),
                &BranchingPolicy::Random { seed: s },
                EnvConfig::training(),
            )
            .expect("episode runs");
            (s, ep)
        })
        .collect()
}

/// A fixed, seeded value model for target comparisons.
pub fn fixed_model(seed: u64) -> QFunction {
    QFunction::new(Architecture::default(), 18, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn accounting_violation(ep: &Episode) -> Option<Value> {
    let steps = ep.step_count();
    let ok_nodes = ep.node_count() == 1 + 2 * steps;
    let ok_return = ep.total_return == ep.config.reward_per_transition * steps as f64;
    (!ok_nodes || !ok_return).then(|| {
        json!({"instance": ep.instance.name, "nodes": ep.node_count(), "steps": steps, "return": ep.total_return})
    })
}

fn identities(opts: &VerifyOptions) -> Vec<Check> {
    let corpus = dfs_corpus(opts);
    let mut checks = Vec::new();

    // Node accounting on the corpus and on every family and selection rule.
    let mut extra = Vec::new();
    for kind in Family::kinds() {
        let family = gen::preset_family("tiny", kind).expect("preset");
        for selection in [NodeSelectionPolicy::DFS, NodeSelectionPolicy::BFS, NodeSelectionPolicy::BEST_BOUND] {
            for s in 0..10 {
                let inst = gen::generate(&FamilySpec::new(family, s)).expect("valid preset");
                let config = EnvConfig { selection, ..EnvConfig::default() };
                extra.push(env::rollout(Arc::new(inst), &BranchingPolicy::Random { seed: s }, config).expect("episode runs"));
            }
        }
    }
    let mut bad = None;
    let mut count = 0;
    for ep in corpus.iter().map(|(_, e)| e).chain(&extra) {
        count += 1;
        if bad.is_none() {
            bad = accounting_violation(ep);
        }
    }
    checks.push(Check::new(
        "node_accounting",
        bad.is_none(),
        format!("{count} episodes: node_count = 1 + 2 steps and return = r * steps"),
        bad,
    ));

    // Subtree sizes: nodes_added_below = 2 + sum over children, leaves 0.
    let mut bad = None;
    let mut branched = 0;
    for (seed, ep) in &corpus {
        let tree = &ep.final_tree;
        for n in &tree.nodes {
            let size = n.subtree_nodes_added.expect("filled");
            let expected = match n.children {
                Some((a, b)) => {
                    branched += 1;
                    2 + tree.nodes[a].subtree_nodes_added.expect("filled") + tree.nodes[b].subtree_nodes_added.expect("filled")
                }
                None => 0,
            };
            let leaf_ok = n.children.is_some() == (n.status == NodeStatus::Branched);
            if (size != expected || !leaf_ok) && bad.is_none() {
                bad = Some(json!({"seed": seed, "node": n.id, "recorded": size, "expected": expected}));
            }
        }
    }
    checks.push(Check::new(
        "subtree_size_recursion",
        bad.is_none(),
        format!("{branched} branched nodes over {} DFS episodes", corpus.len()),
        bad,
    ));

    // Prefix identity at every step.
    let bad = corpus.iter().find_map(|(seed, ep)| {
        env::prefix_identity_violation(ep).map(|(t, lhs, rhs)| json!({"seed": seed, "step": t, "lhs": lhs, "rhs": rhs}))
    });
    let steps: usize = corpus.iter().map(|(_, e)| e.step_count()).sum();
    checks.push(Check::new(
        "prefix_identity",
        bad.is_none(),
        format!("{steps} steps: open subtree sizes sum to twice the remaining steps"),
        bad,
    ));

    // One-step equivalence under a fixed random model.
    let model = fixed_model(opts.seed ^ 0xF1);
    let codec = HistogramCodec::default();
    let values = ModelValues { qfn: &model, codec: &codec };
    let boot = Bootstrap::plain(&values);
    let mut transitions = 0usize;
    let mut bad = None;
    for (seed, ep) in &corpus {
        let recs = env::subtree_records(ep).expect("complete episode");
        for i in 0..recs.records.len() {
            transitions += 1;
            let a = target_1step(&recs, i, boot);
            let b = target_kstep(&recs, i, 1, boot);
            let c = target_treemdp_kstep(&recs, i, 1, boot);
            if (a.to_bits() != b.to_bits() || a.to_bits() != c.to_bits()) && bad.is_none() {
                bad = Some(json!({"seed": seed, "record": i, "one_step": a, "kstep": b, "treemdp": c}));
            }
        }
    }
    checks.push(Check::new(
        "one_step_equivalence",
        bad.is_none() && transitions >= 10_000,
        format!("{transitions} transitions compared bit for bit (at least 10000 required)"),
        bad,
    ));
    checks
}

/// Composite Simpson integral of the standard normal density on `[a, b]`.
fn normal_mass(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    let pdf = |y: f64| (-(y - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let n = 4000;
    let h = (b - a) / n as f64;
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn codec() -> Vec<Check> {
    let c = HistogramCodec::default();
    let mut checks = Vec::new();

    let mut worst: f64 = 0.0;
    let mut worst_at = 0.0;
    let mut v = -1e-3;
    while v > -1e9 {
        let p = c.encode(v).expect("non-positive");
        let err = (p.iter().sum::<f64>() - 1.0).abs();
        let neg = p.iter().any(|&x| x < 0.0);
        if err > worst || neg {
            worst = if neg { f64::INFINITY } else { err };
            worst_at = v;
        }
        v *= 1.07;
    }
    checks.push(Check::new(
        "normalization",
        worst <= 1e-9,
        format!("max |sum - 1| = {worst:e} over a log grid"),
        (worst > 1e-9).then(|| json!({"value": worst_at})),
    ));

    let mut bad = None;
    for (i, zeta) in c.bin_centers().into_iter().enumerate() {
        let mut p = vec![0.0; c.m_bins];
        p[i] = 1.0;
        let d = c.decode(&p).expect("valid");
        if d != -zeta.exp2() && bad.is_none() {
            bad = Some(json!({"bin": i, "decoded": d, "expected": -zeta.exp2()}));
        }
    }
    checks.push(Check::new("one_hot_decode", bad.is_none(), "every bin decodes to -2^center".into(), bad));

    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for v in [-2.0, -10.0, -100.0, -1000.0] {
        let back = c.decode(&c.encode(v).expect("valid")).expect("valid");
        let rel = ((back - v) / v).abs();
        worst = worst.max(rel);
        detail.push(format!("{v} -> {back:.3}"));
    }
    checks.push(Check::new(
        "round_trip",
        worst <= 0.25,
        format!("max relative error {worst:.4}: {}", detail.join(", ")),
        None,
    ));

    let toy = HistogramCodec { m_bins: 18, psi_min: 0.5, psi_max: 18.5, sigma: 0.75 };
    let u = toy.psi(-2.0).expect("valid");
    let raw = toy.interval_mass(u)[0];
    let quad = normal_mass(0.5, 1.5, 1.0, 0.75);
    let ok = (raw - quad).abs() <= 1e-3 && (raw - 0.495).abs() <= 1e-3;
    checks.push(Check::new(
        "toy_mass",
        ok,
        format!("first-bin mass {raw:.6}, quadrature {quad:.6}, reference 0.495"),
        None,
    ));
    checks
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central differences, with a 1e-6 floor on the denominator.
pub fn gradient_error(q: &QFunction, batch: &[Sample<'_>], loss: LossKind, codec: &HistogramCodec) -> f64 {
    let analytic = q.loss_and_gradient(batch, codec, loss).expect("finite").gradient;
    let h = 1e-5;
    let mut probe = q.clone();
    let mut worst: f64 = 0.0;
    for i in 0..q.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let fp = probe.loss_and_gradient(batch, codec, loss).expect("finite").loss;
        probe.params[i] = orig - h;
        let fm = probe.loss_and_gradient(batch, codec, loss).expect("finite").loss;
        probe.params[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn gradients(opts: &VerifyOptions) -> Vec<Check> {
    let codec = HistogramCodec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6AD);
    let mut checks = Vec::new();
    for (arch_name, arch) in [("linear", Architecture::Linear), ("mlp", Architecture::default())] {
        // Central differences lose about eps * loss / h to cancellation, so
        // squared-error targets stay small enough for the loss to be O(100).
        for (loss_name, loss, target_scale) in [("mse", LossKind::Mse, 10.0f64), ("hl_gauss_ce", LossKind::HlGaussCe, 500.0)] {
            let mut worst: f64 = 0.0;
            for _ in 0..opts.gradient_points {
                let q = QFunction::new(arch.clone(), QFunction::outputs_for(loss, &codec), &mut rng);
                let rows: Vec<FeatureRow> = (0..4)
                    .map(|_| std::array::from_fn::<f64, NUM_FEATURES, _>(|_| rng.random_range(-1.0..1.0)))
                    .collect();
                let batch: Vec<Sample> = rows
                    .iter()
                    .map(|r| Sample {
                        features: r,
                        target: -rng.random_range(1.0..target_scale),
                        weight: rng.random_range(0.2..1.0),
                    })
                    .collect();
                worst = worst.max(gradient_error(&q, &batch, loss, &codec));
            }
            checks.push(Check::new(
                &format!("{arch_name}_{loss_name}"),
                worst <= 1e-4,
                format!("max relative error {worst:e} over {} points", opts.gradient_points),
                None,
            ));
        }
    }
    checks
}

fn oracle(opts: &VerifyOptions) -> Vec<Check> {
    let mut checks = Vec::new();
    for kind in Family::kinds() {
        let family = gen::preset_family("tiny", kind).expect("preset");
        let mut bad = None;
        let mut solves = 0;
        for s in opts.seed..opts.seed + opts.oracle_instances as u64 {
            let inst = gen::generate(&FamilySpec::new(family, s)).expect("valid preset");
            let truth = brute_force_optimum(&inst, 1 << 16).expect("enumerable");
            for policy in [
                BranchingPolicy::Random { seed: s },
                BranchingPolicy::MostFractional,
                BranchingPolicy::StrongBranching,
                BranchingPolicy::Pseudocost,
            ] {
                for selection in [NodeSelectionPolicy::DFS, NodeSelectionPolicy::BFS, NodeSelectionPolicy::BEST_BOUND] {
                    solves += 1;
                    let r = bnb::solve(&inst, &policy, selection, Limits::default()).expect("solves");
                    let ok = r.status == bnb::SolveStatus::Optimal && r.objective == truth.objective();
                    if !ok && bad.is_none() {
                        bad = Some(json!({
                            "seed": s, "policy": policy.name(), "selection": selection_name(selection),
                            "bnb": r.objective, "oracle": truth.objective(),
                        }));
                    }
                }
            }
            if let BruteForce::Optimal { evaluated, .. } = truth {
                debug_assert!(evaluated <= 1 << 15);
            }
        }
        checks.push(Check::new(
            kind,
            bad.is_none(),
            format!("{solves} solves on {} tiny instances match enumeration exactly", opts.oracle_instances),
            bad,
        ));
    }
    checks
}

fn divergence(opts: &VerifyOptions) -> Vec<Check> {
    let corpus = dfs_corpus(opts);
    let model = fixed_model(opts.seed ^ 0xD1);
    let codec = HistogramCodec::default();
    let values = ModelValues { qfn: &model, codec: &codec };
    let boot = Bootstrap::plain(&values);
    let mut deep = 0usize;
    let mut witness = None;
    for (seed, ep) in &corpus {
        let recs: EpisodeRecords = env::subtree_records(ep).expect("complete episode");
        deep += (0..recs.records.len()).filter(|&i| branched_depth(&recs, i) >= opts.k).count();
        if witness.is_none() {
            if let Some((i, bbmdp, treemdp)) = divergence_witness(&recs, opts.k, boot) {
                let kf = targets::frontier_kstep(&recs, i, opts.k);
                let tf = targets::frontier_treemdp(&recs, i, opts.k);
                let nodes = |f: &targets::Frontier| f.records.iter().map(|&r| recs.records[r].node_id).collect::<Vec<_>>();
                witness = Some(json!({
                    "seed": seed, "record": i, "node": recs.records[i].node_id,
                    "bbmdp_target": bbmdp, "treemdp_target": treemdp,
                    "bbmdp_frontier_nodes": nodes(&kf), "bbmdp_expansions": kf.expansions,
                    "treemdp_frontier_nodes": nodes(&tf), "treemdp_expansions": tf.expansions,
                }));
            }
        }
    }
    // Without any subtree of branched depth k the constructions cannot differ.
    let passed = witness.is_some() || deep == 0;
    vec![Check::new(
        &format!("kstep_divergence_k{}", opts.k),
        passed,
        format!(
            "{} episodes, {deep} records with branched depth >= {}; witness {}",
            corpus.len(),
            opts.k,
            if witness.is_some() { "found" } else { "not found" }
        ),
        witness,
    )]
}

/// Two-row knapsacks small enough that every branching sequence can be
/// enumerated, kept only when the branching choice changes the tree size.
pub fn enumerable_instances(count: usize, seed: u64) -> Vec<(MilpInstance, usize, usize)> {
    let family = Family::MultiKnapsack { items: 7, knapsacks: 2 };
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < count && s < seed + 10_000 {
        let inst = gen::generate(&FamilySpec::new(family, s)).expect("valid spec");
        s += 1;
        let (lo, hi) = exact::tree_size_range(&inst).expect("enumerates");
        if hi <= 63 && lo < hi {
            out.push((inst, lo, hi));
        }
    }
    out
}

fn exact_dp(opts: &VerifyOptions) -> Vec<Check> {
    let reward = -1.0;
    let instances = enumerable_instances(opts.exact_instances, opts.seed);
    let mut bad = None;
    let mut worst_residual: f64 = 0.0;
    for (inst, _, _) in &instances {
        let r = exact::check_instance(inst, reward).expect("solves");
        worst_residual = worst_residual.max(r.residual);
        if !r.passed(reward) && bad.is_none() {
            bad = Some(json!({
                "instance": inst.name, "min_tree": r.min_tree, "max_tree": r.max_tree,
                "greedy_tree": r.greedy_tree, "root_value": r.root_value, "residual": r.residual,
            }));
        }
    }
    vec![Check::new(
        "value_iteration_greedy_is_minimal",
        bad.is_none() && instances.len() == opts.exact_instances,
        format!(
            "{} instances (largest tree <= 63 nodes, smallest strictly below it), max residual {worst_residual:e}",
            instances.len()
        ),
        bad,
    )]
}

fn context(opts: &VerifyOptions) -> Vec<Check> {
    let seeds = opts.seed..opts.seed + 40;
    let family = gen::preset_family("tiny", "knapsack").expect("preset");
    let instance_for = |s: u64| gen::generate(&FamilySpec::new(family, s)).expect("valid");
    let dfs = env::bfs_context_counterexample(seeds.clone(), instance_for, NodeSelectionPolicy::DFS).expect("runs");
    let bfs = env::bfs_context_counterexample(seeds, instance_for, NodeSelectionPolicy::BFS).expect("runs");
    let dump = |w: &Option<env::ContextWitness>| {
        w.as_ref().map(|w| json!({
            "seed": w.instance_seed, "incumbent_at_selection": w.incumbent_at_selection,
            "subtree_sizes": [w.subtree_sizes.0, w.subtree_sizes.1], "path_length": w.node_path.len(),
        }))
    };
    vec![
        Check::new(
            "dfs_subtree_is_context_free",
            dfs.witness.is_none(),
            format!("{} node pairs compared under DFS", dfs.pairs_compared),
            dump(&dfs.witness),
        ),
        Check::new(
            "bfs_subtree_depends_on_context",
            bfs.witness.is_some(),
            format!("{} node pairs compared under BFS", bfs.pairs_compared),
            dump(&bfs.witness),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn quick_suites_pass_on_reduced_corpora() {
        let opts = VerifyOptions {
            episodes: 5,
            oracle_instances: 5,
            exact_instances: 3,
            gradient_points: 1,
            ..VerifyOptions::default()
        };
        for suite in [Suite::Codec, Suite::Oracle, Suite::Exact, Suite::Divergence] {
            let r = run(suite, &opts);
            assert!(r.passed, "{}", serde_json::to_string_pretty(&r).unwrap());
        }
        let ids = run(Suite::Identities, &opts);
        for name in ["node_accounting", "subtree_size_recursion", "prefix_identity"] {
            assert!(ids.check(name).unwrap().passed, "{name}");
        }
        // Five episodes are too few for the 10 000-transition floor.
        assert!(!ids.check("one_step_equivalence").unwrap().passed);
    }
}
