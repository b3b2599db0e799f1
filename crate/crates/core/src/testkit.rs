//! Shared fixtures and an enumeration oracle for unit tests.

use crate::gen::{self, FamilySpec};
use crate::milp::{MilpInstance, Row};

/// Best objective over all integer points in `[lower, upper]`, by
/// enumeration. Pure-integer instances only.
pub fn enumerate_optimum(inst: &MilpInstance, lower: &[f64], upper: &[f64]) -> Option<f64> {
    assert_eq!(inst.integer.len(), inst.num_vars, "pure integer only");
    if (0..inst.num_vars).any(|j| lower[j].ceil() > upper[j].floor()) {
        return None;
    }
    let mut x: Vec<f64> = lower.iter().map(|l| l.ceil()).collect();
    let mut best: Option<f64> = None;
    loop {
        if inst.max_violation(&x) <= 1e-9 {
            let obj = inst.objective_value(&x);
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
        let mut j = 0;
        loop {
            if j == inst.num_vars {
                return best;
            }
            if x[j] < upper[j].floor() {
                x[j] += 1.0;
                break;
            }
            x[j] = lower[j].ceil();
            j += 1;
        }
    }
}

pub fn optimum(inst: &MilpInstance) -> Option<f64> {
    enumerate_optimum(inst, &inst.lower, &inst.upper)
}

/// `min -v·x  s.t.  w·x <= cap`, binary, with seeded weights.
pub fn knapsack(n: usize, seed: u64) -> MilpInstance {
    let mut rng = gen::SplitMix64::new(seed);
    let weights: Vec<f64> = (0..n).map(|_| rng.range(5, 40) as f64).collect();
    let values = (0..n).map(|_| -(rng.range(5, 40) as f64)).collect();
    let cap = (weights.iter().sum::<f64>() / 2.0).floor();
    MilpInstance {
        name: format!("knapsack{n}-{seed}"),
        num_vars: n,
        objective: values,
        rows: vec![Row::new(weights.into_iter().enumerate().collect(), cap)],
        lower: vec![0.0; n],
        upper: vec![1.0; n],
        integer: (0..n).collect(),
    }
}

/// Tiny preset instance of family `kind`.
pub fn tiny(kind: &str, seed: u64) -> MilpInstance {
    let family = gen::preset_family("tiny", kind).expect("known family");
    gen::generate(&FamilySpec::new(family, seed)).expect("valid preset")
}

pub fn small(kind: &str, seed: u64) -> MilpInstance {
    let family = gen::preset_family("small", kind).expect("known family");
    gen::generate(&FamilySpec::new(family, seed)).expect("valid preset")
}
