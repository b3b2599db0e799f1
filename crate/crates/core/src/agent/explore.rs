//! Exploration: ε-uniform mixed with a Boltzmann policy over Q-values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::targets::argmax;

/// Value decaying linearly from `start` by `decay` per agent step, floored
/// at `min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start: f64,
    pub min: f64,
    pub decay: f64,
}

impl LinearSchedule {
    /// First step at which the floor is reached.
    pub fn floor_step(&self) -> usize {
        if self.decay <= 0.0 {
            return usize::MAX;
        }
        // Guard against `0.975 / 1e-4` landing just above an integer.
        ((self.start - self.min) / self.decay - 1e-9).ceil().max(0.0) as usize
    }

    pub fn at(&self, step: usize) -> f64 {
        if step >= self.floor_step() {
            self.min
        } else {
            (self.start - self.decay * step as f64).max(self.min)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    pub epsilon: LinearSchedule,
    pub temperature: LinearSchedule,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            epsilon: LinearSchedule {
                start: 1.0,
                min: 0.025,
                decay: 1e-4,
            },
            temperature: LinearSchedule {
                start: 1.0,
                min: 1e-3,
                decay: 1e-5,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// ε-uniform, otherwise Boltzmann sampling.
    Explore,
    /// Largest value, ties to the lowest index.
    Greedy,
}

/// Boltzmann probabilities `softmax(q / temperature)`.
pub fn boltzmann(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|q| ((q - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Picks a candidate index given per-candidate values.
pub fn act(
    values: &[f64],
    mode: ActMode,
    config: &ExplorationConfig,
    agent_step: usize,
    rng: &mut impl Rng,
) -> usize {
    assert!(!values.is_empty(), "no candidates");
    match mode {
        ActMode::Greedy => argmax(values),
        ActMode::Explore => {
            if rng.random::<f64>() < config.epsilon.at(agent_step) {
                return rng.random_range(0..values.len());
            }
            let probs = boltzmann(values, config.temperature.at(agent_step));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // Rounding left `u` past the final partial sum.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedules_reach_their_floors() {
        let c = ExplorationConfig::default();
        assert_eq!(c.epsilon.at(0), 1.0);
        assert_eq!(c.epsilon.floor_step(), 9750);
        assert!(c.epsilon.at(9749) > 0.025);
        assert_eq!(c.epsilon.at(9750), 0.025);
        assert_eq!(c.epsilon.at(1_000_000), 0.025);
        assert!((c.epsilon.at(5000) - 0.5).abs() < 1e-12);
        assert_eq!(c.temperature.floor_step(), 99_900);
        assert_eq!(c.temperature.at(99_900), 1e-3);
        assert!(c.temperature.at(99_899) > 1e-3);
    }

    #[test]
    fn greedy_takes_first_maximum() {
        let c = ExplorationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(act(&[-3.0, -1.0, -1.0, -2.0], ActMode::Greedy, &c, 0, &mut rng), 1);
    }

    #[test]
    fn full_epsilon_is_uniform() {
        let c = ExplorationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        let values = [-100.0, -1.0, -50.0, -3.0];
        for _ in 0..40_000 {
            counts[act(&values, ActMode::Explore, &c, 0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }

    #[test]
    fn floor_mixes_uniform_and_near_greedy() {
        let c = ExplorationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values = [-10.0, -2.0, -9.0, -30.0];
        let step = 200_000;
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[act(&values, ActMode::Explore, &c, step, &mut rng)] += 1;
        }
        // At temperature 1e-3 Boltzmann is greedy; ε = 0.025 spreads the rest.
        let off = 0.025 / 4.0;
        for (i, cnt) in counts.iter().enumerate() {
            let p = if i == 1 { 1.0 - 3.0 * off } else { off };
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*cnt as f64 - n as f64 * p).abs() < 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn boltzmann_matches_softmax() {
        let p = boltzmann(&[0.0, 1.0_f64.ln()], 1.0);
        assert!((p[0] - 0.5).abs() < 1e-12);
        let p = boltzmann(&[0.0, 2.0_f64.ln()], 1.0);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
        let p = boltzmann(&[-1e6, 0.0], 1e-3);
        assert_eq!(p, vec![0.0, 1.0]);
    }
}
