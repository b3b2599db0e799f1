//! Exhaustive enumeration of integer assignments.

use bbmdp_core::lp::{self, LpError, LpStatus, EPS_FEAS};
use bbmdp_core::milp::MilpInstance;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{needed} assignments exceed the cap of {cap}")]
    CapExceeded { needed: f64, cap: u64 },
    #[error("integer variable {0} has an infinite bound")]
    UnboundedInteger(usize),
    #[error(transparent)]
    Lp(#[from] LpError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BruteForce {
    Optimal { objective: f64, point: Vec<f64>, evaluated: u64 },
    NoSolution { evaluated: u64 },
}

impl BruteForce {
    pub fn objective(&self) -> Option<f64> {
        match self {
            BruteForce::Optimal { objective, .. } => Some(*objective),
            BruteForce::NoSolution { .. } => None,
        }
    }
}

/// Best objective over every integer assignment within bounds. Continuous
/// variables, if any, are optimized by an LP with the integers fixed.
pub fn brute_force_optimum(inst: &MilpInstance, cap: u64) -> Result<BruteForce, OracleError> {
    let mut ranges = Vec::with_capacity(inst.integer.len());
    let mut needed = 1.0f64;
    for &j in &inst.integer {
        let (l, u) = (inst.lower[j].ceil(), inst.upper[j].floor());
        if !l.is_finite() || !u.is_finite() {
            return Err(OracleError::UnboundedInteger(j));
        }
        ranges.push((j, l, u));
        needed *= (u - l + 1.0).max(0.0);
    }
    if needed > cap as f64 {
        return Err(OracleError::CapExceeded { needed, cap });
    }
    if needed == 0.0 {
        return Ok(BruteForce::NoSolution { evaluated: 0 });
    }
    let all_integer = inst.integer.len() == inst.num_vars;
    let mut x = inst.lower.clone();
    for &(j, l, _) in &ranges {
        x[j] = l;
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluated = 0u64;
    loop {
        evaluated += 1;
        let candidate = if all_integer {
            (inst.max_violation(&x) <= EPS_FEAS).then(|| (inst.objective_value(&x), x.clone()))
        } else {
            let (mut lo, mut hi) = (inst.lower.clone(), inst.upper.clone());
            for &(j, _, _) in &ranges {
                lo[j] = x[j];
                hi[j] = x[j];
            }
            let r = lp::solve_with_bounds(inst, &lo, &hi)?;
            match (r.status, r.point) {
                (LpStatus::Optimal, Some(p)) => Some((inst.objective_value(&p), p)),
                _ => None,
            }
        };
        if let Some((obj, p)) = candidate {
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, p));
            }
        }
        // Odometer increment over the integer variables.
        let mut k = 0;
        loop {
            if k == ranges.len() {
                return Ok(match best {
                    Some((objective, point)) => BruteForce::Optimal { objective, point, evaluated },
                    None => BruteForce::NoSolution { evaluated },
                });
            }
            let (j, l, u) = ranges[k];
            if x[j] < u {
                x[j] += 1.0;
                break;
            }
            x[j] = l;
            k += 1;
        }
    }
}
