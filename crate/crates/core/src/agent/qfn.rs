//! Per-candidate action-value approximators with exact gradients.
//!
//! Parameters are one flat vector. Each layer stores its weight matrix
//! row-major as `inputs × outputs`, followed by its bias. Hidden layers use
//! rectifiers; the output layer is linear and yields either histogram logits
//! or a single scalar.

use matrixmultiply::dgemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureMatrix, FeatureRow, NUM_FEATURES};
use crate::targets::{HistogramCodec, LossKind};

use super::AgentError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub architecture: Architecture,
    pub inputs: usize,
    pub outputs: usize,
    pub params: Vec<f64>,
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths match the dimensions and strides given.
    unsafe {
        dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ · b` for row-major `a: m×k`, `b: m×n`, giving `k×n`.
fn matmul_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if k == 0 || n == 0 {
        return;
    }
    // SAFETY: `a` is read through transposed strides; lengths match.
    unsafe {
        dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · bᵀ` for row-major `a: m×n`, `b: k×n`, giving `m×k`.
fn matmul_bt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || k == 0 {
        return;
    }
    // SAFETY: `b` is read through transposed strides; lengths match.
    unsafe {
        dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            0.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// Activations of every layer for one batch, kept for backpropagation.
pub struct ForwardPass {
    pub batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// One training example: the chosen candidate's features and its target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a FeatureRow,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// `|prediction − target|` per sample, in value space.
    pub td_errors: Vec<f64>,
}

impl QFunction {
    /// Output width for a loss: histogram logits or one scalar.
    pub fn outputs_for(loss: LossKind, codec: &HistogramCodec) -> usize {
        match loss {
            LossKind::HlGaussCe => codec.m_bins,
            LossKind::Mse => 1,
        }
    }

    /// He-uniform weights and zero biases.
    pub fn new(architecture: Architecture, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut q = QFunction {
            architecture,
            inputs: NUM_FEATURES,
            outputs,
            params: Vec::new(),
        };
        let sizes = q.layer_sizes();
        for w in sizes.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            q.params
                .extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            q.params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        q
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.inputs];
        if let Architecture::Mlp { hidden } = &self.architecture {
            sizes.extend(hidden);
        }
        sizes.push(self.outputs);
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of each layer's weights and biases.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.layer_sizes()
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let entry = (off, off + fan_in * fan_out, fan_in, fan_out);
                off += fan_in * fan_out + fan_out;
                entry
            })
            .collect()
    }

    /// Forward pass over `batch` rows of `x` (row-major `batch × inputs`).
    pub fn forward(&self, x: &[f64], batch: usize) -> ForwardPass {
        debug_assert_eq!(x.len(), batch * self.inputs);
        let layout = self.layout();
        let last = layout.len() - 1;
        let mut acts = vec![x.to_vec()];
        for (l, &(w, b, fan_in, fan_out)) in layout.iter().enumerate() {
            let mut z = vec![0.0; batch * fan_out];
            matmul(batch, fan_in, fan_out, &acts[l], &self.params[w..b], &mut z);
            let bias = &self.params[b..b + fan_out];
            for row in z.chunks_mut(fan_out) {
                for (v, bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                    if l < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        ForwardPass { batch, acts }
    }

    /// Gradient of `Σ dout · output` with respect to the parameters.
    pub fn backward(&self, pass: &ForwardPass, dout: &[f64]) -> Vec<f64> {
        let layout = self.layout();
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = dout.to_vec();
        for l in (0..layout.len()).rev() {
            let (w, b, fan_in, fan_out) = layout[l];
            matmul_at(pass.batch, fan_in, fan_out, &pass.acts[l], &delta, &mut grad[w..b]);
            for row in delta.chunks(fan_out) {
                for (g, d) in grad[b..b + fan_out].iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; pass.batch * fan_in];
                matmul_bt(pass.batch, fan_out, fan_in, &delta, &self.params[w..b], &mut prev);
                // Rectifier mask from the stored post-activation values.
                for (p, a) in prev.iter_mut().zip(&pass.acts[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        grad
    }

    /// Scalar value of one output row.
    pub fn value_of(&self, out: &[f64], codec: &HistogramCodec) -> f64 {
        if self.outputs == 1 {
            out[0]
        } else {
            codec.expectation(&softmax(out))
        }
    }

    /// Value estimates of many stacked rows.
    pub fn values_of_rows(&self, rows: &[FeatureRow], codec: &HistogramCodec) -> Vec<f64> {
        let x: Vec<f64> = rows.iter().flatten().copied().collect();
        let pass = self.forward(&x, rows.len());
        pass.output()
            .chunks(self.outputs)
            .map(|o| self.value_of(o, codec))
            .collect()
    }

    /// Value estimate of every candidate of a node.
    pub fn values(&self, fm: &FeatureMatrix, codec: &HistogramCodec) -> Vec<f64> {
        self.values_of_rows(&fm.rows, codec)
    }

    /// Importance-weighted mean loss over `batch` and its exact gradient.
    pub fn loss_and_gradient(
        &self,
        batch: &[Sample<'_>],
        codec: &HistogramCodec,
        loss: LossKind,
    ) -> Result<LossOutput, AgentError> {
        let n = batch.len();
        let x: Vec<f64> = batch.iter().flat_map(|s| s.features.iter().copied()).collect();
        let pass = self.forward(&x, n);
        let mut dout = vec![0.0; n * self.outputs];
        let mut total = 0.0;
        let mut td_errors = Vec::with_capacity(n);
        for (i, s) in batch.iter().enumerate() {
            let out = &pass.output()[i * self.outputs..(i + 1) * self.outputs];
            let d = &mut dout[i * self.outputs..(i + 1) * self.outputs];
            match loss {
                LossKind::Mse => {
                    let err = out[0] - s.target;
                    total += s.weight * err * err;
                    d[0] = 2.0 * s.weight * err / n as f64;
                    td_errors.push(err.abs());
                }
                LossKind::HlGaussCe => {
                    let target = codec.encode(s.target)?;
                    let p = softmax(out);
                    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let log_z = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    let ce: f64 = target.iter().zip(out).map(|(t, z)| -t * (z - log_z)).sum();
                    total += s.weight * ce;
                    for ((g, pi), ti) in d.iter_mut().zip(&p).zip(&target) {
                        *g = s.weight * (pi - ti) / n as f64;
                    }
                    td_errors.push((codec.expectation(&p) - s.target).abs());
                }
            }
        }
        let loss_value = total / n as f64;
        if !loss_value.is_finite() {
            return Err(AgentError::NonFinite(format!(
                "loss {loss_value} on a batch of {n}; targets {:?}",
                batch.iter().map(|s| s.target).take(8).collect::<Vec<_>>()
            )));
        }
        Ok(LossOutput {
            loss: loss_value,
            gradient: self.backward(&pass, &dout),
            td_errors,
        })
    }

    /// `θ' ← (1 − τ)·θ' + τ·θ`.
    pub fn soft_update_from(&mut self, online: &QFunction, tau: f64) {
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    #[serde(skip)]
    m: Vec<f64>,
    #[serde(skip)]
    v: Vec<f64>,
    #[serde(skip)]
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, clip_norm: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Clips `grad` to the configured norm and applies one update. Returns
    /// the norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) -> f64 {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip_norm {
            let scale = self.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain-loop forward pass, independent of the layer layout helpers.
    fn naive_forward(q: &QFunction, x: &[f64]) -> Vec<f64> {
        let sizes = q.layer_sizes();
        let mut a = x.to_vec();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let mut z = vec![0.0; fo];
            for o in 0..fo {
                let mut s = q.params[off + fi * fo + o];
                for i in 0..fi {
                    s += a[i] * q.params[off + i * fo + o];
                }
                z[o] = if l + 2 < sizes.len() { s.max(0.0) } else { s };
            }
            off += fi * fo + fo;
            a = z;
        }
        a
    }

    fn random_row(rng: &mut ChaCha8Rng) -> FeatureRow {
        std::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }

    fn archs() -> [Architecture; 2] {
        [Architecture::Linear, Architecture::Mlp { hidden: vec![16, 8] }]
    }

    #[test]
    fn batched_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in archs() {
            let q = QFunction::new(arch, 18, &mut rng);
            assert_eq!(q.params.len(), q.param_count());
            let rows: Vec<FeatureRow> = (0..7).map(|_| random_row(&mut rng)).collect();
            let x: Vec<f64> = rows.iter().flatten().copied().collect();
            let pass = q.forward(&x, 7);
            for (i, r) in rows.iter().enumerate() {
                let naive = naive_forward(&q, r);
                for (a, b) in naive.iter().zip(&pass.output()[i * 18..(i + 1) * 18]) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }
    }

    #[test]
    fn greedy_values_match_independent_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codec = HistogramCodec::default();
        let q = QFunction::new(Architecture::default(), 18, &mut rng);
        let fm = FeatureMatrix {
            candidates: vec![1, 4, 9],
            rows: (0..3).map(|_| random_row(&mut rng)).collect(),
        };
        let values = q.values(&fm, &codec);
        for (row, v) in fm.rows.iter().zip(&values) {
            let logits = naive_forward(&q, row);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let s: f64 = e.iter().sum();
            let centers = codec.bin_centers();
            let oracle: f64 = e.iter().zip(&centers).map(|(ei, c)| ei / s * -c.exp2()).sum();
            assert!((oracle - v).abs() <= 1e-12 * oracle.abs());
        }
    }

    /// Central differences of the loss against the analytic gradient.
    fn max_relative_error(q: &QFunction, batch: &[Sample<'_>], loss: LossKind) -> f64 {
        let codec = HistogramCodec::default();
        let analytic = q.loss_and_gradient(batch, &codec, loss).unwrap().gradient;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..q.params.len() {
            let mut plus = q.clone();
            plus.params[i] += h;
            let mut minus = q.clone();
            minus.params[i] -= h;
            let fp = plus.loss_and_gradient(batch, &codec, loss).unwrap().loss;
            let fm = minus.loss_and_gradient(batch, &codec, loss).unwrap().loss;
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codec = HistogramCodec::default();
        for arch in archs() {
            for loss in [LossKind::Mse, LossKind::HlGaussCe] {
                for _ in 0..10 {
                    let q = QFunction::new(arch.clone(), QFunction::outputs_for(loss, &codec), &mut rng);
                    let rows: Vec<FeatureRow> = (0..4).map(|_| random_row(&mut rng)).collect();
                    let batch: Vec<Sample> = rows
                        .iter()
                        .map(|r| Sample {
                            features: r,
                            target: -rng.random_range(1.0..200.0f64),
                            weight: rng.random_range(0.2..1.0),
                        })
                        .collect();
                    let err = max_relative_error(&q, &batch, loss);
                    assert!(err <= 1e-4, "{arch:?} {loss:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn matching_prediction_minimizes_cross_entropy() {
        let codec = HistogramCodec::default();
        let target = -37.0;
        let p = codec.encode(target).unwrap();
        // A linear model with zero weights whose bias is log p.
        let mut q = QFunction::new(Architecture::Linear, 18, &mut ChaCha8Rng::seed_from_u64(0));
        let nw = 12 * 18;
        q.params[..nw].iter_mut().for_each(|w| *w = 0.0);
        for (b, pi) in q.params[nw..].iter_mut().zip(&p) {
            *b = pi.max(1e-300).ln();
        }
        let row = [0.3; NUM_FEATURES];
        let out = q
            .loss_and_gradient(&[Sample { features: &row, target, weight: 1.0 }], &codec, LossKind::HlGaussCe)
            .unwrap();
        let entropy: f64 = p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum();
        assert!((out.loss - entropy).abs() < 1e-9);
        assert!(out.gradient.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn perfect_mse_prediction_has_zero_loss() {
        let mut q = QFunction::new(Architecture::Linear, 1, &mut ChaCha8Rng::seed_from_u64(0));
        q.params.iter_mut().for_each(|p| *p = 0.0);
        *q.params.last_mut().unwrap() = -12.0;
        let row = [0.5; NUM_FEATURES];
        let out = q
            .loss_and_gradient(&[Sample { features: &row, target: -12.0, weight: 1.0 }], &HistogramCodec::default(), LossKind::Mse)
            .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn soft_update_shrinks_gap_by_one_minus_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let online = QFunction::new(Architecture::default(), 18, &mut rng);
        let mut target = QFunction::new(Architecture::default(), 18, &mut rng);
        let gap = |a: &QFunction, b: &QFunction| {
            a.params.iter().zip(&b.params).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let before = gap(&online, &target);
        target.soft_update_from(&online, 1e-4);
        let after = gap(&online, &target);
        assert!((after / before - (1.0 - 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn adam_clips_and_descends() {
        let mut adam = Adam::new(0.1, 10.0);
        let mut params = vec![1.0, -2.0];
        let mut grad = vec![300.0, -400.0];
        let norm = adam.step(&mut params, &mut grad);
        assert_eq!(norm, 500.0);
        assert!((grad[0] - 6.0).abs() < 1e-12 && (grad[1] + 8.0).abs() < 1e-12);
        // The first bias-corrected step moves each coordinate by about lr.
        assert!((params[0] - 0.9).abs() < 1e-6);
        assert!((params[1] + 1.9).abs() < 1e-6);
    }
}
