//! LP relaxations via a dense-tableau, bounded-variable primal simplex.
//!
//! Rows `a·x <= b` receive a slack `s >= 0`. Rows whose slack starts negative
//! get an artificial variable instead, driven to zero by a phase-one
//! objective. Pricing is Dantzig's rule until `3·(n+m)` iterations have
//! elapsed, then Bland's rule.

use thiserror::Error;

use crate::milp::MilpInstance;

/// Feasibility tolerance on rows and bounds.
pub const EPS_FEAS: f64 = 1e-7;
/// Integrality tolerance.
pub const EPS_INT: f64 = 1e-6;

const EPS_PIVOT: f64 = 1e-9;
const EPS_COST: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpResult {
    pub status: LpStatus,
    pub point: Option<Vec<f64>>,
    pub objective: Option<f64>,
    pub iterations: usize,
}

impl LpResult {
    fn without_point(status: LpStatus, iterations: usize) -> Self {
        Self {
            status,
            point: None,
            objective: None,
            iterations,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("simplex exceeded its iteration cap of {limit}")]
    IterationLimit { limit: usize },
    #[error("operation requires an optimal LP result, got {0:?}")]
    NotOptimal(LpStatus),
}

/// Solves the relaxation of `instance` with its own bounds.
pub fn solve_relaxation(instance: &MilpInstance) -> Result<LpResult, LpError> {
    solve_with_bounds(instance, &instance.lower, &instance.upper)
}

/// Solves the relaxation of `instance` with `lower`/`upper` replacing its bounds.
pub fn solve_with_bounds(
    instance: &MilpInstance,
    lower: &[f64],
    upper: &[f64],
) -> Result<LpResult, LpError> {
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Ok(LpResult::without_point(LpStatus::Infeasible, 0));
    }
    Simplex::new(instance, lower, upper).run(instance)
}

/// True iff every integer variable is within `EPS_INT` of an integer.
pub fn is_integral(result: &LpResult, instance: &MilpInstance) -> Result<bool, LpError> {
    let point = match (&result.status, &result.point) {
        (LpStatus::Optimal, Some(p)) => p,
        (status, _) => return Err(LpError::NotOptimal(*status)),
    };
    Ok(instance
        .integer
        .iter()
        .all(|&j| (point[j] - point[j].round()).abs() <= EPS_INT))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Position {
    Basic(usize),
    AtLower,
    AtUpper,
    Free,
}

struct Simplex {
    m: usize,
    n: usize,
    cols: usize,
    /// Row-major `m × cols` tableau, `B^-1 [A | I | -E]`.
    tab: Vec<f64>,
    /// Original rows and right-hand sides, used to recompute basic values.
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    /// Row owning each artificial column.
    art_rows: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    pos: Vec<Position>,
    basis: Vec<usize>,
    cost: Vec<f64>,
    reduced: Vec<f64>,
    artificial: usize,
    iterations: usize,
    limit: usize,
    bland_after: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    fn new(instance: &MilpInstance, lower: &[f64], upper: &[f64]) -> Self {
        let n = instance.num_vars;
        let m = instance.num_cons();

        let mut x = vec![0.0; n + m];
        let mut pos = vec![Position::Free; n + m];
        for j in 0..n {
            if lower[j].is_finite() {
                x[j] = lower[j];
                pos[j] = Position::AtLower;
            } else if upper[j].is_finite() {
                x[j] = upper[j];
                pos[j] = Position::AtUpper;
            }
        }
        let slack: Vec<f64> = instance
            .rows
            .iter()
            .map(|r| r.rhs - r.activity(&x[..n]))
            .collect();
        let infeasible_rows: Vec<usize> = (0..m).filter(|&i| slack[i] < 0.0).collect();
        let artificial = infeasible_rows.len();
        let cols = n + m + artificial;

        let mut tab = vec![0.0; m * cols];
        let mut basis = vec![0; m];
        x.resize(cols, 0.0);
        pos.resize(cols, Position::AtLower);
        let mut var_lower: Vec<f64> = lower.to_vec();
        let mut var_upper: Vec<f64> = upper.to_vec();
        var_lower.resize(cols, 0.0);
        var_upper.resize(cols, f64::INFINITY);

        let mut art = n + m;
        for (i, row) in instance.rows.iter().enumerate() {
            let line = &mut tab[i * cols..(i + 1) * cols];
            for &(j, a) in &row.coeffs {
                line[j] += a;
            }
            line[n + i] = 1.0;
            if slack[i] < 0.0 {
                // a·x + s - t = b with t basic: negate the row so t has coefficient +1.
                line[art] = -1.0;
                for v in line.iter_mut() {
                    *v = -*v;
                }
                basis[i] = art;
                x[art] = -slack[i];
                pos[art] = Position::Basic(i);
                x[n + i] = 0.0;
                pos[n + i] = Position::AtLower;
                art += 1;
            } else {
                basis[i] = n + i;
                x[n + i] = slack[i];
                pos[n + i] = Position::Basic(i);
            }
        }
        let rhs = instance.rows.iter().map(|r| r.rhs).collect();
        let rows = instance.rows.iter().map(|r| r.coeffs.clone()).collect();
        let mut cost = vec![0.0; cols];
        for c in &mut cost[n + m..] {
            *c = 1.0;
        }
        Self {
            m,
            n,
            cols,
            tab,
            rows,
            rhs,
            art_rows: infeasible_rows,
            lower: var_lower,
            upper: var_upper,
            x,
            pos,
            basis,
            cost,
            reduced: vec![0.0; cols],
            artificial,
            iterations: 0,
            limit: 50 * (n + m).max(1),
            bland_after: 3 * (n + m),
        }
    }

    fn run(mut self, instance: &MilpInstance) -> Result<LpResult, LpError> {
        if self.artificial > 0 {
            self.price();
            self.iterate()?;
            self.refresh_basic_values();
            let infeasibility: f64 = self.x[self.n + self.m..].iter().sum();
            let scale = 1.0 + self.rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            if infeasibility > EPS_FEAS * scale {
                return Ok(LpResult::without_point(
                    LpStatus::Infeasible,
                    self.iterations,
                ));
            }
            for j in self.n + self.m..self.cols {
                self.upper[j] = 0.0;
                if !matches!(self.pos[j], Position::Basic(_)) {
                    self.x[j] = 0.0;
                    self.pos[j] = Position::AtLower;
                }
            }
        }
        self.cost.iter_mut().for_each(|c| *c = 0.0);
        self.cost[..self.n].copy_from_slice(&instance.objective);
        self.price();
        match self.iterate()? {
            Outcome::Unbounded => Ok(LpResult::without_point(
                LpStatus::Unbounded,
                self.iterations,
            )),
            Outcome::Optimal => {
                self.refresh_basic_values();
                let mut point = self.x[..self.n].to_vec();
                for (j, v) in point.iter_mut().enumerate() {
                    // Basic values may sit a rounding error outside their box.
                    *v = v.clamp(self.lower[j], self.upper[j]);
                }
                let objective = instance.objective_value(&point);
                Ok(LpResult {
                    status: LpStatus::Optimal,
                    point: Some(point),
                    objective: Some(objective),
                    iterations: self.iterations,
                })
            }
        }
    }

    /// Recomputes reduced costs from scratch for the current cost vector.
    fn price(&mut self) {
        self.reduced.copy_from_slice(&self.cost);
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = self.cost[b];
            if cb != 0.0 {
                let row = &self.tab[i * self.cols..(i + 1) * self.cols];
                for (d, t) in self.reduced.iter_mut().zip(row) {
                    *d -= cb * t;
                }
            }
        }
    }

    /// `x_B = B^-1 (b - N x_N)`, with `B^-1` read off the slack columns.
    fn refresh_basic_values(&mut self) {
        let (n, m) = (self.n, self.m);
        let mut resid = self.rhs.clone();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                if !matches!(self.pos[j], Position::Basic(_)) {
                    resid[i] -= a * self.x[j];
                }
            }
            if !matches!(self.pos[n + i], Position::Basic(_)) {
                resid[i] -= self.x[n + i];
            }
        }
        for (k, &i) in self.art_rows.iter().enumerate() {
            let j = n + m + k;
            if !matches!(self.pos[j], Position::Basic(_)) {
                resid[i] += self.x[j];
            }
        }
        for r in 0..m {
            let binv = &self.tab[r * self.cols + n..r * self.cols + n + m];
            let v: f64 = binv.iter().zip(&resid).map(|(a, b)| a * b).sum();
            self.x[self.basis[r]] = v;
        }
    }

    fn eligible(&self, j: usize) -> Option<f64> {
        let d = self.reduced[j];
        match self.pos[j] {
            Position::Basic(_) => None,
            _ if self.lower[j] == self.upper[j] => None,
            Position::AtLower if d < -EPS_COST => Some(1.0),
            Position::AtUpper if d > EPS_COST => Some(-1.0),
            Position::Free if d.abs() > EPS_COST => Some(-d.signum()),
            _ => None,
        }
    }

    fn iterate(&mut self) -> Result<Outcome, LpError> {
        loop {
            if self.iterations >= self.limit {
                return Err(LpError::IterationLimit { limit: self.limit });
            }
            let bland = self.iterations >= self.bland_after;
            let entering = if bland {
                (0..self.cols).find_map(|j| self.eligible(j).map(|dir| (j, dir)))
            } else {
                let mut best: Option<(usize, f64, f64)> = None;
                for j in 0..self.cols {
                    if let Some(dir) = self.eligible(j) {
                        let score = self.reduced[j].abs();
                        if best.is_none_or(|(_, _, s)| score > s) {
                            best = Some((j, dir, score));
                        }
                    }
                }
                best.map(|(j, dir, _)| (j, dir))
            };
            let Some((q, dir)) = entering else {
                return Ok(Outcome::Optimal);
            };
            self.iterations += 1;

            // Ratio test.
            let mut step = self.upper[q] - self.lower[q];
            let mut leave: Option<(usize, bool)> = None;
            let mut leave_alpha = 0.0_f64;
            for i in 0..self.m {
                let alpha = self.tab[i * self.cols + q];
                let change = -dir * alpha;
                let b = self.basis[i];
                let (limit, to_upper) = if change > EPS_PIVOT && self.upper[b].is_finite() {
                    (((self.upper[b] - self.x[b]) / change).max(0.0), true)
                } else if change < -EPS_PIVOT && self.lower[b].is_finite() {
                    (((self.x[b] - self.lower[b]) / -change).max(0.0), false)
                } else {
                    continue;
                };
                let better = match leave {
                    _ if limit < step - 1e-12 => true,
                    Some((r, _)) if limit <= step + 1e-12 => {
                        if bland {
                            b < self.basis[r]
                        } else {
                            alpha.abs() > leave_alpha.abs()
                        }
                    }
                    _ => false,
                };
                if better {
                    step = limit.min(step);
                    leave = Some((i, to_upper));
                    leave_alpha = alpha;
                }
            }
            if !step.is_finite() {
                return Ok(Outcome::Unbounded);
            }

            for i in 0..self.m {
                let alpha = self.tab[i * self.cols + q];
                if alpha != 0.0 {
                    let b = self.basis[i];
                    self.x[b] -= dir * alpha * step;
                }
            }
            match leave {
                None => {
                    // Bound flip.
                    if dir > 0.0 {
                        self.x[q] = self.upper[q];
                        self.pos[q] = Position::AtUpper;
                    } else {
                        self.x[q] = self.lower[q];
                        self.pos[q] = Position::AtLower;
                    }
                }
                Some((r, to_upper)) => {
                    let b = self.basis[r];
                    self.x[q] += dir * step;
                    if to_upper {
                        self.x[b] = self.upper[b];
                        self.pos[b] = Position::AtUpper;
                    } else {
                        self.x[b] = self.lower[b];
                        self.pos[b] = Position::AtLower;
                    }
                    self.pivot(r, q);
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let cols = self.cols;
        let piv = self.tab[r * cols + q];
        {
            let row = &mut self.tab[r * cols..(r + 1) * cols];
            let inv = 1.0 / piv;
            for v in row.iter_mut() {
                *v *= inv;
            }
            row[q] = 1.0;
        }
        let pivot_row: Vec<f64> = self.tab[r * cols..(r + 1) * cols].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tab[i * cols + q];
            if f != 0.0 {
                let row = &mut self.tab[i * cols..(i + 1) * cols];
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                row[q] = 0.0;
            }
        }
        let f = self.reduced[q];
        if f != 0.0 {
            for (d, p) in self.reduced.iter_mut().zip(&pivot_row) {
                *d -= f * p;
            }
            self.reduced[q] = 0.0;
        }
        self.basis[r] = q;
        self.pos[q] = Position::Basic(r);
    }
}
