//! Prioritized replay over a binary sum tree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;

/// Complete binary tree of partial sums over `capacity` leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    /// `nodes[1]` is the root; leaves start at `nodes[size]`.
    nodes: Vec<f64>,
    size: usize,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let size = capacity.max(1).next_power_of_two();
        Self {
            capacity,
            nodes: vec![0.0; 2 * size],
            size,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.size + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.capacity, "leaf {i} out of range");
        assert!(value >= 0.0 && value.is_finite(), "leaf mass {value}");
        let mut n = self.size + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`. Values at or past the
    /// total resolve to the last leaf with positive mass.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.size {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub min_fill: usize,
    /// Priority exponent.
    pub alpha: f64,
    /// Importance exponent at the first gradient step.
    pub beta_start: f64,
    /// Gradient steps over which the importance exponent reaches 1.
    pub beta_steps: usize,
    /// Added to every absolute TD error.
    pub min_priority: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            min_fill: 20_000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_steps: 100_000,
            min_priority: 1e-3,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.capacity == 0 || self.min_fill > self.capacity {
            return Err(AgentError::InvalidConfig(format!(
                "replay capacity {} with min fill {}",
                self.capacity, self.min_fill
            )));
        }
        if !(self.alpha >= 0.0) || !(0.0..=1.0).contains(&self.beta_start) || !(self.min_priority > 0.0) {
            return Err(AgentError::InvalidConfig("replay exponents".into()));
        }
        Ok(())
    }

    pub fn beta(&self, gradient_step: usize) -> f64 {
        if self.beta_steps == 0 {
            return 1.0;
        }
        let frac = (gradient_step as f64 / self.beta_steps as f64).min(1.0);
        self.beta_start + (1.0 - self.beta_start) * frac
    }
}

/// A sampled batch: slot indices and normalized importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    pub slots: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    config: ReplayConfig,
    items: Vec<T>,
    tree: SumTree,
    next: usize,
    /// Largest priority assigned so far; new items receive it.
    max_priority: f64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(config: ReplayConfig) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(Self {
            config,
            items: Vec::with_capacity(config.capacity.min(1 << 16)),
            tree: SumTree::new(config.capacity),
            next: 0,
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn is_ready(&self) -> bool {
        self.items.len() >= self.config.min_fill.max(1)
    }

    pub fn get(&self, slot: usize) -> &T {
        &self.items[slot]
    }

    /// Sampling mass of a slot, `priority^alpha`.
    pub fn mass(&self, slot: usize) -> f64 {
        self.tree.get(slot)
    }

    pub fn total_mass(&self) -> f64 {
        self.tree.total()
    }

    /// Inserts with the maximum priority seen so far, overwriting the
    /// oldest item once full.
    pub fn push(&mut self, item: T) {
        let slot = self.next;
        if slot < self.items.len() {
            self.items[slot] = item;
        } else {
            self.items.push(item);
        }
        self.tree.set(slot, self.max_priority.powf(self.config.alpha));
        self.next = (self.next + 1) % self.config.capacity;
    }

    /// Proportional stratified sample of `batch` slots.
    pub fn sample(
        &self,
        batch: usize,
        gradient_step: usize,
        rng: &mut impl Rng,
    ) -> Result<ReplayBatch, AgentError> {
        if !self.is_ready() {
            return Err(AgentError::ReplayNotReady {
                len: self.items.len(),
                min_fill: self.config.min_fill,
            });
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let beta = self.config.beta(gradient_step);
        let n = self.items.len() as f64;
        let mut slots = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for i in 0..batch {
            let mass = segment * (i as f64 + rng.random::<f64>());
            let slot = self.tree.find(mass.min(total)).min(self.items.len() - 1);
            let p = self.tree.get(slot) / total;
            slots.push(slot);
            weights.push((n * p).powf(-beta));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        weights.iter_mut().for_each(|w| *w /= max);
        Ok(ReplayBatch { slots, weights })
    }

    /// Sets each slot's priority to `|δ| + min_priority`.
    pub fn update_priorities(&mut self, slots: &[usize], td_errors: &[f64]) {
        for (&slot, &delta) in slots.iter().zip(td_errors) {
            let priority = delta.abs() + self.config.min_priority;
            self.max_priority = self.max_priority.max(priority);
            self.tree.set(slot, priority.powf(self.config.alpha));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(capacity: usize, min_fill: usize) -> ReplayConfig {
        ReplayConfig {
            capacity,
            min_fill,
            ..ReplayConfig::default()
        }
    }

    proptest! {
        #[test]
        fn sum_tree_matches_prefix_sums(
            masses in prop::collection::vec(0.0f64..10.0, 1..40),
            probes in prop::collection::vec(0.0f64..1.0, 1..20),
        ) {
            let mut tree = SumTree::new(masses.len());
            for (i, m) in masses.iter().enumerate() {
                tree.set(i, *m);
            }
            let total: f64 = masses.iter().sum();
            prop_assert!((tree.total() - total).abs() <= 1e-9 * (1.0 + total));
            if total > 0.0 {
                for u in probes {
                    let mass = u * total;
                    // Naive oracle: first leaf whose running sum exceeds `mass`.
                    let mut acc = 0.0;
                    let mut oracle = None;
                    for (i, m) in masses.iter().enumerate() {
                        if *m > 0.0 && mass < acc + m {
                            oracle = Some(i);
                            break;
                        }
                        acc += m;
                    }
                    let found = tree.find(mass);
                    prop_assert!(masses[found] > 0.0);
                    if let Some(o) = oracle {
                        // Sums in different orders may disagree at a boundary.
                        let lo: f64 = masses[..found].iter().sum();
                        let hi = lo + masses[found];
                        prop_assert!(found == o || (mass - lo).abs() < 1e-9 || (mass - hi).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn equal_priorities_sample_uniformly_with_unit_weights() {
        let mut buf = ReplayBuffer::new(config(10, 10)).unwrap();
        for i in 0..10 {
            buf.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 10];
        let draws = 20_000;
        for _ in 0..draws / 10 {
            let b = buf.sample(10, 0, &mut rng).unwrap();
            assert!(b.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
            for s in b.slots {
                counts[s] += 1;
            }
        }
        // Chi-squared against uniform with 9 degrees of freedom; 27.88 is
        // the 0.999 quantile.
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 27.88, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn sampling_follows_priorities() {
        let mut buf = ReplayBuffer::new(ReplayConfig {
            alpha: 1.0,
            ..config(4, 4)
        })
        .unwrap();
        for i in 0..4 {
            buf.push(i);
        }
        let cfg = *buf.config();
        buf.update_priorities(&[0, 1, 2, 3], &[1.0 - cfg.min_priority, 2.0 - cfg.min_priority, 3.0 - cfg.min_priority, 4.0 - cfg.min_priority]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 4];
        for _ in 0..5000 {
            for s in buf.sample(4, 0, &mut rng).unwrap().slots {
                counts[s] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            let expected = 20_000.0 * (i + 1) as f64 / 10.0;
            assert!(((*c as f64) - expected).abs() < 0.05 * expected, "{counts:?}");
        }
        // Importance weights: (N·P)^-1 normalized by the batch maximum.
        let b = buf.sample(4, cfg.beta_steps, &mut rng).unwrap();
        let max_raw = b.slots.iter().map(|&s| 10.0 / (4.0 * (s + 1) as f64)).fold(0.0, f64::max);
        for (s, w) in b.slots.iter().zip(&b.weights) {
            let raw = 10.0 / (4.0 * (*s + 1) as f64);
            assert!((w - raw / max_raw).abs() < 1e-12);
        }
    }

    #[test]
    fn new_items_take_the_max_priority() {
        let mut buf = ReplayBuffer::new(ReplayConfig {
            alpha: 1.0,
            ..config(8, 1)
        })
        .unwrap();
        buf.push(0);
        buf.update_priorities(&[0], &[5.0]);
        buf.push(1);
        assert_eq!(buf.mass(1), 5.0 + 1e-3);
    }

    #[test]
    fn overwrites_oldest_when_full() {
        let mut buf = ReplayBuffer::new(config(3, 1)).unwrap();
        for i in 0..5 {
            buf.push(i);
        }
        assert_eq!(buf.len(), 3);
        assert_eq!((*buf.get(0), *buf.get(1), *buf.get(2)), (3, 4, 2));
    }

    #[test]
    fn refuses_to_sample_before_min_fill() {
        let mut buf = ReplayBuffer::new(config(10, 5)).unwrap();
        buf.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample(2, 0, &mut rng),
            Err(AgentError::ReplayNotReady { len: 1, min_fill: 5 })
        ));
    }

    #[test]
    fn beta_anneals_linearly_to_one() {
        let c = ReplayConfig::default();
        assert_eq!(c.beta(0), 0.4);
        assert!((c.beta(50_000) - 0.7).abs() < 1e-12);
        assert_eq!(c.beta(100_000), 1.0);
        assert_eq!(c.beta(500_000), 1.0);
    }
}
