//! Policy evaluation over instance sets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use bbmdp_core::agent::{checkpoint, LearnedScorer, TrainConfig};
use bbmdp_core::bnb::{BranchingPolicy, Limits, NodeSelectionPolicy, SelectionKind};
use bbmdp_core::env::{self, EnvConfig, EnvError, Episode};
use bbmdp_core::targets::HistogramCodec;
use serde::Serialize;
use thiserror::Error;

use crate::io::{self, IoError, NamedInstance};
use crate::metrics::{self, EvalRow, MetricsError, RankBy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown policy {0:?}; expected random, most-fractional, strong-branching, pseudocost or learned:<checkpoint>")]
    UnknownPolicy(String),
    #[error("unknown node selection {0:?}; expected dfs, bfs or best-bound")]
    UnknownSelection(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn parse_selection(s: &str) -> Result<NodeSelectionPolicy, EvalError> {
    match s {
        "dfs" => Ok(NodeSelectionPolicy::DFS),
        "bfs" => Ok(NodeSelectionPolicy::BFS),
        "best-bound" | "best" => Ok(NodeSelectionPolicy::BEST_BOUND),
        other => Err(EvalError::UnknownSelection(other.into())),
    }
}

pub fn selection_name(s: NodeSelectionPolicy) -> &'static str {
    match s.kind {
        SelectionKind::Dfs => "dfs",
        SelectionKind::Bfs => "bfs",
        SelectionKind::BestBound => "best-bound",
    }
}

/// A branching rule as named on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Random,
    MostFractional,
    StrongBranching,
    Pseudocost,
    Learned(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "random" => PolicySpec::Random,
            "most-fractional" | "mf" => PolicySpec::MostFractional,
            "strong-branching" | "sb" => PolicySpec::StrongBranching,
            "pseudocost" | "pc" => PolicySpec::Pseudocost,
            _ => match s.strip_prefix("learned:") {
                Some(path) if !path.is_empty() => PolicySpec::Learned(path.into()),
                _ => return Err(EvalError::UnknownPolicy(s.into())),
            },
        })
    }
}

/// A policy ready to instantiate per seed.
#[derive(Clone)]
pub struct Policy {
    pub name: String,
    kind: PolicyKind,
}

#[derive(Clone)]
enum PolicyKind {
    Random,
    Fixed(BranchingPolicy),
}

impl Policy {
    pub fn fixed(policy: BranchingPolicy) -> Self {
        Self {
            name: policy.name(),
            kind: PolicyKind::Fixed(policy),
        }
    }

    pub fn random() -> Self {
        Self {
            name: "random".into(),
            kind: PolicyKind::Random,
        }
    }

    pub fn learned(scorer: LearnedScorer) -> Self {
        Self::fixed(scorer.policy())
    }

    pub fn resolve(spec: &PolicySpec) -> Result<Self, EvalError> {
        Ok(match spec {
            PolicySpec::Random => Self::random(),
            PolicySpec::MostFractional => Self::fixed(BranchingPolicy::MostFractional),
            PolicySpec::StrongBranching => Self::fixed(BranchingPolicy::StrongBranching),
            PolicySpec::Pseudocost => Self::fixed(BranchingPolicy::Pseudocost),
            PolicySpec::Learned(path) => Self::learned(load_scorer(path)?),
        })
    }

    pub fn branching(&self, seed: u64) -> BranchingPolicy {
        match &self.kind {
            PolicyKind::Random => BranchingPolicy::Random { seed },
            PolicyKind::Fixed(p) => p.clone(),
        }
    }
}

/// Loads a checkpoint; the codec comes from a sibling `config.json` written
/// by `train`, or the default codec.
pub fn load_scorer(path: &Path) -> Result<LearnedScorer, EvalError> {
    let err = |message: String| EvalError::Checkpoint {
        path: path.into(),
        message,
    };
    let ckpt = checkpoint::load(path).map_err(|e| err(e.to_string()))?;
    let config_path = path.with_file_name("config.json");
    let codec = if config_path.exists() {
        let config: TrainConfig = io::read_json(&config_path)?;
        if config.digest() != ckpt.config_digest {
            return Err(err("config.json does not match the checkpoint digest".into()));
        }
        config.codec
    } else {
        HistogramCodec::default()
    };
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(LearnedScorer::new(ckpt.qfn, codec, format!("learned:{stem}")))
}

/// One episode of `policy` on `inst`, returning the row and the episode.
pub fn run_cell(
    inst: &NamedInstance,
    policy: &Policy,
    selection: NodeSelectionPolicy,
    seed: u64,
    limits: Limits,
) -> Result<(EvalRow, Episode), EvalError> {
    let config = EnvConfig {
        selection,
        limits,
        ..EnvConfig::default()
    };
    let start = Instant::now();
    let episode = env::rollout(Arc::clone(&inst.instance), &policy.branching(seed), config)?;
    let seconds = start.elapsed().as_secs_f64();
    let tree = &episode.final_tree;
    let solved = !episode.truncated;
    let gap = if solved {
        0.0
    } else {
        tree.gub - tree.best_open_bound()
    };
    let row = EvalRow {
        instance: inst.name.clone(),
        family: inst.family.clone(),
        policy: policy.name.clone(),
        selection: selection_name(selection).into(),
        seed,
        nodes: episode.node_count(),
        steps: episode.step_count(),
        solved,
        objective: tree.incumbent.as_ref().map(|a| a.objective_value),
        gap,
        seconds,
    };
    Ok((row, episode))
}

#[derive(Debug, Serialize)]
struct TraceLine<'a> {
    step: usize,
    focus: usize,
    action: usize,
    reward: f64,
    open_count: usize,
    gub: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    done: Option<&'a str>,
}

/// Per-transition JSONL trace of an episode.
pub fn trace_jsonl(episode: &Episode) -> Vec<u8> {
    let mut out = Vec::new();
    let last = episode.transitions.len().saturating_sub(1);
    for (i, t) in episode.transitions.iter().enumerate() {
        let line = TraceLine {
            step: t.step,
            focus: t.focus,
            action: t.action,
            reward: t.reward,
            open_count: t.open_count,
            gub: t.gub.is_finite().then_some(t.gub),
            done: (i == last).then_some(if episode.truncated { "truncated" } else { "solved" }),
        };
        serde_json::to_writer(&mut out, &line).expect("serializable");
        out.push(b'\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Serialize)]
pub struct Aggregates {
    pub policies: Vec<String>,
    pub families: BTreeMap<String, BTreeMap<String, metrics::PolicyAggregate>>,
    pub ranks_by_nodes: BTreeMap<String, metrics::RankSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_score: Option<BTreeMap<String, metrics::NormalizedScore>>,
}

#[derive(Debug, Serialize)]
pub struct TimingAggregates {
    pub geomean_seconds: BTreeMap<String, f64>,
    pub ranks_by_seconds: BTreeMap<String, metrics::RankSummary>,
}

/// Rows as written to the deterministic CSV, without wall-clock time.
#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct CsvRow {
    pub instance: String,
    pub family: String,
    pub policy: String,
    pub selection: String,
    pub seed: u64,
    pub nodes: usize,
    pub steps: usize,
    pub solved: bool,
    pub objective: Option<f64>,
    pub gap: f64,
}

impl From<&EvalRow> for CsvRow {
    fn from(r: &EvalRow) -> Self {
        CsvRow {
            instance: r.instance.clone(),
            family: r.family.clone(),
            policy: r.policy.clone(),
            selection: r.selection.clone(),
            seed: r.seed,
            nodes: r.nodes,
            steps: r.steps,
            solved: r.solved,
            objective: r.objective,
            gap: r.gap,
        }
    }
}

impl From<CsvRow> for EvalRow {
    fn from(r: CsvRow) -> Self {
        EvalRow {
            instance: r.instance,
            family: r.family,
            policy: r.policy,
            selection: r.selection,
            seed: r.seed,
            nodes: r.nodes,
            steps: r.steps,
            solved: r.solved,
            objective: r.objective,
            gap: r.gap,
            seconds: 0.0,
        }
    }
}

impl EvalReport {
    pub fn aggregates(&self, reference: Option<&str>) -> Result<Aggregates, EvalError> {
        Ok(Aggregates {
            policies: metrics::policies(&self.rows),
            families: metrics::aggregate_nodes(&self.rows),
            ranks_by_nodes: metrics::wins_and_ranks(&self.rows, RankBy::Nodes),
            reference: reference.map(str::to_string),
            normalized_score: reference
                .map(|r| metrics::normalized_score(&self.rows, r))
                .transpose()?,
        })
    }

    pub fn timing(&self) -> TimingAggregates {
        let mut secs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            // Floor at one microsecond so trivial solves stay in the log domain.
            secs.entry(r.policy.clone()).or_default().push(r.seconds.max(1e-6));
        }
        TimingAggregates {
            geomean_seconds: secs.into_iter().map(|(p, v)| (p, metrics::geometric_mean(&v))).collect(),
            ranks_by_seconds: metrics::wins_and_ranks(&self.rows, RankBy::Seconds),
        }
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow::from(r))?;
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }

    pub fn timing_csv_bytes(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["instance", "policy", "seed", "seconds"])?;
        for r in &self.rows {
            w.write_record([r.instance.clone(), r.policy.clone(), r.seed.to_string(), r.seconds.to_string()])?;
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(bytes);
        let rows = r
            .deserialize::<CsvRow>()
            .map(|row| row.map(EvalRow::from))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    /// Writes `rows.csv`, `report.json`, `timings.csv` and `timing.json`.
    /// Only the last two depend on wall-clock time.
    pub fn write(&self, dir: &Path, reference: Option<&str>) -> Result<(), EvalError> {
        io::write(&dir.join("rows.csv"), &self.csv_bytes()?)?;
        io::write_json(&dir.join("report.json"), &self.aggregates(reference)?)?;
        io::write(&dir.join("timings.csv"), &self.timing_csv_bytes()?)?;
        io::write_json(&dir.join("timing.json"), &self.timing())?;
        Ok(())
    }
}

/// Runs every (policy, instance, seed) cell in that nesting order.
pub fn evaluate(
    policies: &[Policy],
    instances: &[NamedInstance],
    selection: NodeSelectionPolicy,
    seeds: &[u64],
    limits: Limits,
    traces: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::with_capacity(policies.len() * instances.len() * seeds.len());
    for policy in policies {
        for inst in instances {
            for &seed in seeds {
                let (row, episode) = run_cell(inst, policy, selection, seed, limits)?;
                if let Some(dir) = traces {
                    let file = format!("{}__{}__s{}.jsonl", inst.name, policy.name.replace(['/', ':'], "_"), seed);
                    io::write(&dir.join(file), &trace_jsonl(&episode))?;
                }
                rows.push(row);
            }
        }
    }
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::generate_set;
    use bbmdp_core::gen;

    fn baselines() -> Vec<Policy> {
        ["random", "most-fractional", "strong-branching", "pseudocost"]
            .iter()
            .map(|s| Policy::resolve(&s.parse().unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn parses_policy_and_selection_names() {
        assert_eq!("sb".parse::<PolicySpec>().unwrap(), PolicySpec::StrongBranching);
        assert_eq!("learned:a/b.bin".parse::<PolicySpec>().unwrap(), PolicySpec::Learned("a/b.bin".into()));
        assert!("learned:".parse::<PolicySpec>().is_err());
        assert!("greedy".parse::<PolicySpec>().is_err());
        assert_eq!(parse_selection("bfs").unwrap(), NodeSelectionPolicy::BFS);
        assert!(parse_selection("dfs2").is_err());
    }

    #[test]
    fn deterministic_outputs_and_recomputable_aggregates() {
        let set = generate_set(gen::preset_family("tiny", "cauctions").unwrap(), 10, 4).unwrap();
        let run = || evaluate(&baselines(), &set, NodeSelectionPolicy::DFS, &[1, 2], Limits::default(), None).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.csv_bytes().unwrap(), b.csv_bytes().unwrap());
        let ja = serde_json::to_vec(&a.aggregates(Some("random")).unwrap()).unwrap();
        let jb = serde_json::to_vec(&b.aggregates(Some("random")).unwrap()).unwrap();
        assert_eq!(ja, jb);
        // Aggregates recomputed from the parsed CSV are byte-identical.
        let back = EvalReport::from_csv(&a.csv_bytes().unwrap()).unwrap();
        assert_eq!(serde_json::to_vec(&back.aggregates(Some("random")).unwrap()).unwrap(), ja);
        assert_eq!(a.rows.len(), 4 * 4 * 2);
        for r in &a.rows {
            assert_eq!(r.nodes, 1 + 2 * r.steps);
            assert!(r.solved);
        }
    }

    #[test]
    fn unsolved_cells_carry_limit_counts_and_gaps() {
        let set = generate_set(gen::preset_family("small", "knapsack").unwrap(), 0, 2).unwrap();
        let limits = Limits { max_nodes: 21, ..Limits::default() };
        let report = evaluate(&[Policy::random()], &set, NodeSelectionPolicy::DFS, &[0], limits, None).unwrap();
        for r in &report.rows {
            assert!(!r.solved);
            assert!(r.nodes <= 21 && r.nodes >= 19);
            assert!(r.gap >= 0.0);
        }
    }

    #[test]
    fn traces_have_one_line_per_transition() {
        let set = generate_set(gen::preset_family("tiny", "setcover").unwrap(), 3, 1).unwrap();
        let (row, episode) = run_cell(&set[0], &Policy::random(), NodeSelectionPolicy::DFS, 0, Limits::default()).unwrap();
        let trace = trace_jsonl(&episode);
        let lines: Vec<&[u8]> = trace.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), row.steps);
    }
}
