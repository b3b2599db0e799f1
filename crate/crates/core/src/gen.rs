//! Seeded generators for set cover, combinatorial auction, multiple knapsack
//! and maximum independent set instances.
//!
//! Instance bytes depend only on the spec: the generators draw from
//! [`SplitMix64`], whose output is fixed by its published constants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::milp::{MilpInstance, Row};

/// Resampling attempts per row before a spec is declared degenerate.
pub const RESAMPLE_LIMIT: usize = 10_000;

/// SplitMix64 (Steele, Lea and Flood): a Weyl counter passed through a
/// 64-bit finalizer.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
    const MIX2: u64 = 0x94D0_49BB_1331_11EB;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(Self::MIX1);
        z = (z ^ (z >> 27)).wrapping_mul(Self::MIX2);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `0..n` by rejection, so no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.below(hi - lo + 1)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// `k` distinct values from `0..n`, ascending (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut out = pool[..k].to_vec();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("could not sample a valid {what} within {RESAMPLE_LIMIT} attempts")]
    ResampleLimit { what: &'static str },
}

fn default_max_cost() -> u64 {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    SetCover {
        rows: usize,
        cols: usize,
        density: f64,
        /// Column costs are drawn uniformly from `1..=max_cost`.
        #[serde(default = "default_max_cost")]
        max_cost: u64,
    },
    CombAuction { items: usize, bids: usize },
    MultiKnapsack { items: usize, knapsacks: usize },
    MaxIndepSet { nodes: usize, affinity: usize },
}

impl Family {
    pub fn kind(&self) -> &'static str {
        match self {
            Family::SetCover { .. } => "setcover",
            Family::CombAuction { .. } => "cauctions",
            Family::MultiKnapsack { .. } => "knapsack",
            Family::MaxIndepSet { .. } => "indset",
        }
    }

    pub fn kinds() -> [&'static str; 4] {
        ["setcover", "cauctions", "knapsack", "indset"]
    }

    fn check(&self) -> Result<(), GenError> {
        let counts: &[usize] = match self {
            Family::SetCover { rows, cols, .. } => &[*rows, *cols],
            Family::CombAuction { items, bids } => &[*items, *bids],
            Family::MultiKnapsack { items, knapsacks } => &[*items, *knapsacks],
            Family::MaxIndepSet { nodes, affinity } => &[*nodes, *affinity],
        };
        if counts.contains(&0) {
            return Err(GenError::InvalidSpec(format!("{} has a zero count", self.kind())));
        }
        if let Family::SetCover { cols, density, max_cost, .. } = self {
            if *max_cost == 0 {
                return Err(GenError::InvalidSpec("set cover costs need max_cost >= 1".into()));
            }
            if !(*density > 0.0 && *density <= 1.0) {
                return Err(GenError::InvalidSpec(format!("density {density} not in (0, 1]")));
            }
            if *cols < 2 {
                return Err(GenError::InvalidSpec("set cover needs two columns".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    #[serde(flatten)]
    pub family: Family,
    pub seed: u64,
}

impl FamilySpec {
    pub fn new(family: Family, seed: u64) -> Self {
        Self { family, seed }
    }

    pub fn name(&self) -> String {
        let params = match self.family {
            Family::SetCover { rows, cols, density, max_cost } => format!("{rows}x{cols}-d{density}-c{max_cost}"),
            Family::CombAuction { items, bids } => format!("{items}i{bids}b"),
            Family::MultiKnapsack { items, knapsacks } => format!("{items}i{knapsacks}k"),
            Family::MaxIndepSet { nodes, affinity } => format!("{nodes}n{affinity}a"),
        };
        format!("{}-{}-s{}", self.family.kind(), params, self.seed)
    }
}

/// Builds the instance described by `spec`. All variables are binary.
pub fn generate(spec: &FamilySpec) -> Result<MilpInstance, GenError> {
    spec.family.check()?;
    let mut rng = SplitMix64::new(spec.seed);
    let (objective, rows) = match spec.family {
        Family::SetCover { rows, cols, density, max_cost } => set_cover(&mut rng, rows, cols, density, max_cost)?,
        Family::CombAuction { items, bids } => comb_auction(&mut rng, items, bids),
        Family::MultiKnapsack { items, knapsacks } => multi_knapsack(&mut rng, items, knapsacks),
        Family::MaxIndepSet { nodes, affinity } => max_indep_set(&mut rng, nodes, affinity),
    };
    let n = objective.len();
    Ok(MilpInstance {
        name: spec.name(),
        num_vars: n,
        objective,
        rows,
        lower: vec![0.0; n],
        upper: vec![1.0; n],
        integer: (0..n).collect(),
    })
}

type Parts = (Vec<f64>, Vec<Row>);

fn set_cover(
    rng: &mut SplitMix64,
    rows: usize,
    cols: usize,
    density: f64,
    max_cost: u64,
) -> Result<Parts, GenError> {
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut attempts = 0;
        let members = loop {
            let members: Vec<usize> = (0..cols).filter(|_| rng.chance(density)).collect();
            if members.len() >= 2 {
                break members;
            }
            attempts += 1;
            if attempts >= RESAMPLE_LIMIT {
                return Err(GenError::ResampleLimit { what: "cover row" });
            }
        };
        out.push(Row::new(members.into_iter().map(|j| (j, -1.0)).collect(), -1.0));
    }
    let costs = (0..cols).map(|_| rng.range(1, max_cost) as f64).collect();
    Ok((costs, out))
}

fn comb_auction(rng: &mut SplitMix64, items: usize, bids: usize) -> Parts {
    let base: Vec<u64> = (0..items).map(|_| rng.range(1, 50)).collect();
    let mut bidders_of = vec![Vec::new(); items];
    let mut values = Vec::with_capacity(bids);
    for b in 0..bids {
        let size = rng.range(1, items.min(5) as u64) as usize;
        let bundle = rng.sample_distinct(items, size);
        let sum: u64 = bundle.iter().map(|&i| base[i]).sum();
        // Each extra item raises the bundle's value by 20% plus noise.
        let synergy = 1.0 + 0.2 * (size - 1) as f64;
        let noise = rng.range(0, 10);
        values.push(-((sum as f64 * synergy).round() + noise as f64));
        for i in bundle {
            bidders_of[i].push(b);
        }
    }
    let rows = bidders_of
        .into_iter()
        .filter(|bs| !bs.is_empty())
        .map(|bs| Row::new(bs.into_iter().map(|b| (b, 1.0)).collect(), 1.0))
        .collect();
    (values, rows)
}

fn multi_knapsack(rng: &mut SplitMix64, items: usize, knapsacks: usize) -> Parts {
    let weights: Vec<Vec<u64>> = (0..knapsacks)
        .map(|_| (0..items).map(|_| rng.range(1, 100)).collect())
        .collect();
    let profits = (0..items)
        .map(|i| {
            let mean = weights.iter().map(|w| w[i]).sum::<u64>() / knapsacks as u64;
            -((mean + rng.range(0, 20)) as f64)
        })
        .collect();
    let rows = weights
        .into_iter()
        .map(|w| {
            let capacity = (w.iter().sum::<u64>() / 2) as f64;
            Row::new(w.into_iter().enumerate().map(|(i, x)| (i, x as f64)).collect(), capacity)
        })
        .collect();
    (profits, rows)
}

fn max_indep_set(rng: &mut SplitMix64, nodes: usize, affinity: usize) -> Parts {
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    let seed_size = (affinity + 1).min(nodes);
    for u in 0..seed_size {
        for v in u + 1..seed_size {
            edges.insert((u, v));
        }
    }
    // Endpoint multiset: sampling from it is sampling proportional to degree.
    let mut endpoints: Vec<usize> = edges.iter().flat_map(|&(u, v)| [u, v]).collect();
    for v in seed_size..nodes {
        let mut targets = BTreeSet::new();
        while targets.len() < affinity.min(v) {
            let u = if endpoints.is_empty() {
                rng.below(v as u64) as usize
            } else {
                endpoints[rng.below(endpoints.len() as u64) as usize]
            };
            targets.insert(u);
        }
        for u in targets {
            edges.insert((u, v));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    let rows = edges
        .into_iter()
        .map(|(u, v)| Row::new(vec![(u, 1.0), (v, 1.0)], 1.0))
        .collect();
    (vec![-1.0; nodes], rows)
}

/// Named desk-scale presets, one configuration per family.
pub fn desk_presets() -> BTreeMap<&'static str, [Family; 4]> {
    BTreeMap::from([
        (
            "tiny",
            [
                Family::SetCover { rows: 8, cols: 12, density: 0.3, max_cost: 100 },
                Family::CombAuction { items: 6, bids: 12 },
                Family::MultiKnapsack { items: 12, knapsacks: 2 },
                Family::MaxIndepSet { nodes: 12, affinity: 2 },
            ],
        ),
        (
            "small",
            [
                Family::SetCover { rows: 40, cols: 80, density: 0.2, max_cost: 2 },
                Family::CombAuction { items: 20, bids: 80 },
                Family::MultiKnapsack { items: 20, knapsacks: 3 },
                Family::MaxIndepSet { nodes: 60, affinity: 4 },
            ],
        ),
        (
            "paper-shape",
            [
                Family::SetCover { rows: 500, cols: 1000, density: 0.05, max_cost: 100 },
                Family::CombAuction { items: 100, bids: 500 },
                Family::MultiKnapsack { items: 100, knapsacks: 6 },
                Family::MaxIndepSet { nodes: 500, affinity: 4 },
            ],
        ),
    ])
}

/// The `kind` family of preset `name`.
pub fn preset_family(name: &str, kind: &str) -> Option<Family> {
    desk_presets()
        .get(name)?
        .iter()
        .copied()
        .find(|f| f.kind() == kind)
}
