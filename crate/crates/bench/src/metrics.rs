//! Aggregate metrics over evaluation rows: geometric means, normalized
//! scores, wins and mean ranks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One solved (policy, instance, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance: String,
    pub family: String,
    pub policy: String,
    pub selection: String,
    pub seed: u64,
    pub nodes: usize,
    pub steps: usize,
    pub solved: bool,
    pub objective: Option<f64>,
    /// `gub − best open LP bound`; 0 when solved, infinite without incumbent.
    pub gap: f64,
    /// Wall-clock time. Kept out of the deterministic outputs.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("reference policy {0} is not in the report")]
    MissingReference(String),
}

/// Plain geometric mean; `NaN` for an empty slice.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Geometric mean of `value + shift`, minus `shift`.
pub fn shifted_geometric_mean(values: &[f64], shift: f64) -> f64 {
    let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
    geometric_mean(&shifted) - shift
}

/// Policies in first-seen order.
pub fn policies(rows: &[EvalRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.policy) {
            out.push(r.policy.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub cells: usize,
    pub solved: usize,
    pub geomean_nodes: f64,
}

/// `family → policy → aggregate`, over rows in their given order.
pub fn aggregate_nodes(rows: &[EvalRow]) -> BTreeMap<String, BTreeMap<String, PolicyAggregate>> {
    let mut groups: BTreeMap<(String, String), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.family.clone(), r.policy.clone())).or_default().push(r);
    }
    let mut out: BTreeMap<String, BTreeMap<String, PolicyAggregate>> = BTreeMap::new();
    for ((family, policy), rs) in groups {
        let nodes: Vec<f64> = rs.iter().map(|r| r.nodes as f64).collect();
        out.entry(family).or_default().insert(
            policy,
            PolicyAggregate {
                cells: rs.len(),
                solved: rs.iter().filter(|r| r.solved).count(),
                geomean_nodes: geometric_mean(&nodes),
            },
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScore {
    pub per_family: BTreeMap<String, f64>,
    /// Arithmetic mean of the per-family scores.
    pub overall: f64,
}

/// `100 · geomean(policy) / geomean(reference)` per family.
pub fn normalized_score(
    rows: &[EvalRow],
    reference: &str,
) -> Result<BTreeMap<String, NormalizedScore>, MetricsError> {
    let agg = aggregate_nodes(rows);
    let mut out: BTreeMap<String, NormalizedScore> = BTreeMap::new();
    for (family, by_policy) in &agg {
        let base = by_policy
            .get(reference)
            .ok_or_else(|| MetricsError::MissingReference(reference.to_string()))?
            .geomean_nodes;
        for (policy, a) in by_policy {
            out.entry(policy.clone())
                .or_insert_with(|| NormalizedScore {
                    per_family: BTreeMap::new(),
                    overall: 0.0,
                })
                .per_family
                .insert(family.clone(), 100.0 * a.geomean_nodes / base);
        }
    }
    for s in out.values_mut() {
        s.overall = s.per_family.values().sum::<f64>() / s.per_family.len() as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Seconds,
    Nodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub wins: usize,
    pub mean_rank: f64,
}

/// Ranks of each policy on one instance cell, best first.
pub fn rank_cell<'a>(cell: &[&'a EvalRow], by: RankBy) -> Vec<&'a EvalRow> {
    let mut sorted = cell.to_vec();
    sorted.sort_by(|a, b| {
        let primary = match (a.solved, b.solved) {
            (true, false) => std::cmp::Ordering::Less,
            (false, true) => std::cmp::Ordering::Greater,
            (true, true) => match by {
                RankBy::Seconds => a.seconds.total_cmp(&b.seconds),
                RankBy::Nodes => a.nodes.cmp(&b.nodes),
            },
            (false, false) => a.gap.total_cmp(&b.gap),
        };
        primary
            .then(a.nodes.cmp(&b.nodes))
            .then_with(|| a.policy.cmp(&b.policy))
    });
    sorted
}

/// Wins and mean ranks per policy, ranking within each (instance, seed).
/// A win is a rank-1 finish on a solved cell.
pub fn wins_and_ranks(rows: &[EvalRow], by: RankBy) -> BTreeMap<String, RankSummary> {
    let names = policies(rows);
    let mut cells: BTreeMap<(String, u64), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.instance.clone(), r.seed)).or_default().push(r);
    }
    let mut rank_sum: BTreeMap<String, (usize, usize, usize)> = names
        .iter()
        .map(|p| (p.clone(), (0, 0, 0)))
        .collect();
    for cell in cells.values() {
        for (i, r) in rank_cell(cell, by).into_iter().enumerate() {
            let e = rank_sum.get_mut(&r.policy).expect("known policy");
            e.0 += i + 1;
            e.1 += 1;
            if i == 0 && r.solved {
                e.2 += 1;
            }
        }
    }
    rank_sum
        .into_iter()
        .map(|(p, (sum, count, wins))| {
            (
                p,
                RankSummary {
                    wins,
                    mean_rank: sum as f64 / count.max(1) as f64,
                },
            )
        })
        .collect()
}
