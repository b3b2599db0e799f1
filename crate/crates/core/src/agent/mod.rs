//! Histogram-valued DQN branching agent and its training loop.
//!
//! The agent scores every fractional candidate of the focus node with a
//! shared per-candidate network. Training plays DFS episodes, turns every
//! finished episode into subtree records, and regresses each branching
//! decision onto a k-step subtree backup bootstrapped by a slowly tracking
//! target network.

pub mod checkpoint;
pub mod explore;
pub mod qfn;
pub mod replay;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::{
    self, BnbError, BranchingPolicy, CandidateScorer, Limits, NodeId, NodeSelectionPolicy,
    SearchTree,
};
use crate::env::{self, EnvConfig, EnvError, NodeObs};
use crate::features::{self, FeatureMatrix, FeatureRow};
use crate::gen::{self, Family, FamilySpec, GenError, SplitMix64};
use crate::targets::{
    argmax, backup, frontier_kstep, frontier_treemdp, ActionValues, CodecError, Frontier,
    HistogramCodec, TargetConfig, TargetKind,
};

use checkpoint::Checkpoint;
use explore::{act, ActMode, ExplorationConfig};
use qfn::{Adam, Architecture, QFunction, Sample};
use replay::{ReplayBuffer, ReplayConfig};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Bnb(#[from] BnbError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("replay holds {len} items, needs {min_fill} before sampling")]
    ReplayNotReady { len: usize, min_fill: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at gradient step {step}: {detail}")]
    Diverged {
        step: usize,
        detail: String,
        /// Encoded checkpoint of the last finite parameters.
        checkpoint: Vec<u8>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A trained network as a branching scorer.
#[derive(Debug, Clone)]
pub struct LearnedScorer {
    pub qfn: QFunction,
    pub codec: HistogramCodec,
    pub label: String,
}

impl LearnedScorer {
    pub fn new(qfn: QFunction, codec: HistogramCodec, label: impl Into<String>) -> Self {
        Self {
            qfn,
            codec,
            label: label.into(),
        }
    }

    pub fn policy(self) -> BranchingPolicy {
        BranchingPolicy::Learned(Arc::new(self))
    }
}

impl CandidateScorer for LearnedScorer {
    fn scores(&self, tree: &SearchTree, id: NodeId, candidates: &[usize]) -> Vec<f64> {
        let fm = features::featurize(tree, id).expect("scored node is open");
        debug_assert_eq!(fm.candidates, candidates);
        self.qfn.values(&fm, &self.codec)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Decoded candidate values of a network, for target construction.
pub struct ModelValues<'a> {
    pub qfn: &'a QFunction,
    pub codec: &'a HistogramCodec,
}

impl ActionValues for ModelValues<'_> {
    fn q_values(&self, obs: &NodeObs) -> Vec<f64> {
        self.qfn.values(&obs.features, self.codec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Family that training and validation instances are drawn from.
    pub family: Family,
    pub target: TargetConfig,
    pub codec: HistogramCodec,
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Branching decisions between gradient steps.
    pub steps_per_update: usize,
    /// Soft target update rate.
    pub tau: f64,
    /// Let the online network choose bootstrap actions that the target
    /// network then scores.
    pub double_q: bool,
    pub replay: ReplayConfig,
    pub exploration: ExplorationConfig,
    pub gradient_steps: usize,
    /// Episodes longer than this are truncated and discarded.
    pub max_episode_steps: usize,
    /// Optional hard cap on episodes, for runs that may never fill replay.
    pub max_episodes: Option<usize>,
    /// Gradient steps between validation passes; 0 disables validation.
    pub validation_every: usize,
    pub validation_instances: usize,
    pub validation_seed: u64,
    pub validation_max_nodes: usize,
    /// Gradient steps between curve points.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            family: gen::preset_family("small", "setcover").expect("preset exists"),
            target: TargetConfig::default(),
            codec: HistogramCodec::default(),
            architecture: Architecture::default(),
            learning_rate: 5e-5,
            grad_clip: 10.0,
            batch_size: 128,
            steps_per_update: 10,
            tau: 1e-4,
            double_q: true,
            replay: ReplayConfig::default(),
            exploration: ExplorationConfig::default(),
            gradient_steps: 20_000,
            max_episode_steps: 20_000,
            max_episodes: None,
            validation_every: 0,
            validation_instances: 20,
            validation_seed: 0x5eed_0000_0000_0001,
            validation_max_nodes: 100_000,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        self.replay.validate()?;
        self.codec.validate()?;
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.steps_per_update == 0 || self.log_every == 0 {
            return bad("batch size, update cadence and log cadence must be positive");
        }
        if self.target.k == 0 {
            return bad("k must be positive");
        }
        if !(self.target.reward_per_transition < 0.0) {
            return bad("reward must be negative");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return bad("optimizer settings out of range");
        }
        if let Architecture::Mlp { hidden } = &self.architecture {
            if hidden.contains(&0) {
                return bad("empty hidden layer");
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        checkpoint::digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            reward_per_transition: self.target.reward_per_transition,
            selection: NodeSelectionPolicy::DFS,
            gamma: 1.0,
            limits: Limits {
                max_steps: self.max_episode_steps,
                ..Limits::default()
            },
        }
    }

    /// Seeds of the validation instances.
    pub fn validation_seeds(&self) -> Vec<u64> {
        let mut rng = SplitMix64::new(self.validation_seed);
        (0..self.validation_instances).map(|_| rng.next_u64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gradient_step: usize,
    pub agent_steps: usize,
    pub episodes: usize,
    pub truncated_episodes: usize,
    pub replay_len: usize,
    /// Mean loss since the previous point.
    pub mean_loss: Option<f64>,
    pub epsilon: f64,
    pub temperature: f64,
    /// Geometric mean greedy tree size on the validation set.
    pub validation_geomean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub online: QFunction,
    pub target: QFunction,
    pub curves: Vec<CurvePoint>,
    pub gradient_steps: usize,
    pub agent_steps: usize,
    pub episodes: usize,
    pub truncated_episodes: usize,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn scorer(&self, codec: HistogramCodec, label: impl Into<String>) -> LearnedScorer {
        LearnedScorer::new(self.online.clone(), codec, label)
    }
}

/// One replayed decision: the chosen row and the branched frontier it
/// bootstraps on, both inside a shared per-episode feature store.
#[derive(Debug, Clone)]
struct Stored {
    episode: Arc<Vec<FeatureMatrix>>,
    record: usize,
    action_row: usize,
    frontier: Frontier,
}

impl Stored {
    fn row(&self) -> &FeatureRow {
        &self.episode[self.record].rows[self.action_row]
    }
}

/// Geometric mean of positive values.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Greedy tree sizes of `scorer` on `seeds` of `family` under DFS.
pub fn greedy_tree_sizes(
    scorer: &LearnedScorer,
    family: Family,
    seeds: &[u64],
    max_nodes: usize,
) -> Result<Vec<usize>, AgentError> {
    let policy = scorer.clone().policy();
    seeds
        .iter()
        .map(|&seed| {
            let inst = gen::generate(&FamilySpec { family, seed })?;
            let limits = Limits {
                max_nodes,
                ..Limits::default()
            };
            Ok(bnb::solve(&inst, &policy, NodeSelectionPolicy::DFS, limits)?.node_count)
        })
        .collect()
}

struct Learner<'a> {
    config: &'a TrainConfig,
    online: QFunction,
    target: QFunction,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Learner<'_> {
    /// Bootstrapped targets for a batch, with all frontier rows of all
    /// samples evaluated in one pass per network.
    fn targets(&self, items: &[&Stored]) -> Vec<f64> {
        let codec = &self.config.codec;
        let mut rows: Vec<FeatureRow> = Vec::new();
        let mut spans = Vec::new();
        for s in items {
            for &r in &s.frontier.records {
                let fm = &s.episode[r];
                spans.push((rows.len(), fm.len()));
                rows.extend_from_slice(&fm.rows);
            }
        }
        let online = self.online.values_of_rows(&rows, codec);
        let scored = if self.config.double_q {
            self.target.values_of_rows(&rows, codec)
        } else {
            online.clone()
        };
        let mut next = spans.iter();
        items
            .iter()
            .map(|s| {
                backup(&s.frontier, self.config.target.reward_per_transition, |_| {
                    let &(start, len) = next.next().expect("one span per frontier record");
                    let best = argmax(&online[start..start + len]);
                    scored[start + best]
                })
            })
            .collect()
    }

    fn update(
        &mut self,
        buffer: &mut ReplayBuffer<Stored>,
        gradient_step: usize,
    ) -> Result<f64, AgentError> {
        let batch = buffer.sample(self.config.batch_size, gradient_step, &mut self.rng)?;
        let items: Vec<&Stored> = batch.slots.iter().map(|&s| buffer.get(s)).collect();
        let targets = self.targets(&items);
        let samples: Vec<Sample> = items
            .iter()
            .zip(&targets)
            .zip(&batch.weights)
            .map(|((s, &target), &weight)| Sample {
                features: s.row(),
                target,
                weight,
            })
            .collect();
        let mut out = self
            .online
            .loss_and_gradient(&samples, &self.config.codec, self.config.target.loss)?;
        if out.gradient.iter().any(|g| !g.is_finite()) {
            return Err(AgentError::NonFinite("gradient".into()));
        }
        self.adam.step(&mut self.online.params, &mut out.gradient);
        if self.online.params.iter().any(|p| !p.is_finite()) {
            return Err(AgentError::NonFinite("parameters after update".into()));
        }
        self.target.soft_update_from(&self.online, self.config.tau);
        buffer.update_priorities(&batch.slots, &out.td_errors);
        Ok(out.loss)
    }
}

/// Trains with the default no-op progress callback.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, AgentError> {
    train_with(config, &mut |_| {})
}

/// Runs the training loop, reporting every curve point to `progress`.
pub fn train_with(
    config: &TrainConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainOutcome, AgentError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let outputs = QFunction::outputs_for(config.target.loss, &config.codec);
    let online = QFunction::new(config.architecture.clone(), outputs, &mut rng);
    let mut learner = Learner {
        config,
        target: online.clone(),
        online,
        adam: Adam::new(config.learning_rate, config.grad_clip),
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c65_6172_6e65_7221),
    };
    let mut buffer: ReplayBuffer<Stored> = ReplayBuffer::new(config.replay)?;
    let mut instance_seeds = SplitMix64::new(config.seed);
    let env_config = config.env_config();
    let validation_seeds = config.validation_seeds();
    let digest = config.digest();

    let mut curves = Vec::new();
    let (mut gradient_steps, mut agent_steps, mut episodes, mut truncated) = (0, 0, 0, 0);
    let mut losses: Vec<f64> = Vec::new();

    let mut point = |gradient_steps: usize,
                     agent_steps: usize,
                     episodes: usize,
                     truncated: usize,
                     replay_len: usize,
                     losses: &mut Vec<f64>,
                     validation: Option<f64>| {
        let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        losses.clear();
        let p = CurvePoint {
            gradient_step: gradient_steps,
            agent_steps,
            episodes,
            truncated_episodes: truncated,
            replay_len,
            mean_loss,
            epsilon: config.exploration.epsilon.at(agent_steps),
            temperature: config.exploration.temperature.at(agent_steps),
            validation_geomean: validation,
        };
        progress(&p);
        p
    };

    'episodes: while gradient_steps < config.gradient_steps
        && config.max_episodes.is_none_or(|cap| episodes < cap)
    {
        let inst = Arc::new(gen::generate(&FamilySpec {
            family: config.family,
            seed: instance_seeds.next_u64(),
        })?);
        let (mut environment, mut done) = env::reset(inst, env_config)?;
        while !done && environment.within_limits() {
            let fm = environment.observe()?;
            let values = learner.online.values(&fm, &config.codec);
            let choice = act(&values, ActMode::Explore, &config.exploration, agent_steps, &mut learner.rng);
            done = environment.step(fm.candidates[choice])?.1;
            agent_steps += 1;
            if agent_steps % config.steps_per_update == 0
                && buffer.is_ready()
                && gradient_steps < config.gradient_steps
            {
                match learner.update(&mut buffer, gradient_steps) {
                    Ok(loss) => losses.push(loss),
                    Err(AgentError::NonFinite(detail)) => {
                        return Err(AgentError::Diverged {
                            step: gradient_steps,
                            detail,
                            checkpoint: checkpoint::encode(&Checkpoint {
                                qfn: learner.target.clone(),
                                config_digest: digest,
                                gradient_step: gradient_steps as u64,
                            }),
                        });
                    }
                    Err(e) => return Err(e),
                }
                gradient_steps += 1;
                let validate_now =
                    config.validation_every > 0 && gradient_steps % config.validation_every == 0;
                if gradient_steps % config.log_every == 0 || validate_now {
                    let validation = if validate_now {
                        let scorer = LearnedScorer::new(learner.online.clone(), config.codec, "validation");
                        let sizes = greedy_tree_sizes(&scorer, config.family, &validation_seeds, config.validation_max_nodes)?;
                        Some(geometric_mean(&sizes.iter().map(|&s| s as f64).collect::<Vec<_>>()))
                    } else {
                        None
                    };
                    curves.push(point(gradient_steps, agent_steps, episodes, truncated, buffer.len(), &mut losses, validation));
                }
                if gradient_steps >= config.gradient_steps {
                    episodes += 1;
                    break 'episodes;
                }
            }
        }
        episodes += 1;
        let episode = environment.finish();
        if episode.truncated {
            truncated += 1;
            continue;
        }
        let records = env::subtree_records(&episode)?;
        let frontiers: Vec<Frontier> = (0..records.records.len())
            .map(|i| match config.target.kind {
                TargetKind::Bbmdp => frontier_kstep(&records, i, config.target.k),
                TargetKind::TreeMdp => frontier_treemdp(&records, i, config.target.k),
            })
            .collect();
        let action_rows: Vec<usize> = records.records.iter().map(|r| r.action_row()).collect();
        let store = Arc::new(records.records.into_iter().map(|r| r.obs.features).collect::<Vec<_>>());
        for (i, (frontier, action_row)) in frontiers.into_iter().zip(action_rows).enumerate() {
            buffer.push(Stored {
                episode: Arc::clone(&store),
                record: i,
                action_row,
                frontier,
            });
        }
    }
    if curves.last().is_none_or(|p| p.gradient_step != gradient_steps) {
        curves.push(point(gradient_steps, agent_steps, episodes, truncated, buffer.len(), &mut losses, None));
    }
    let checkpoint = Checkpoint {
        qfn: learner.online.clone(),
        config_digest: digest,
        gradient_step: gradient_steps as u64,
    };
    Ok(TrainOutcome {
        online: learner.online,
        target: learner.target,
        curves,
        gradient_steps,
        agent_steps,
        episodes,
        truncated_episodes: truncated,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::LossKind;

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            family: gen::preset_family("tiny", "setcover").unwrap(),
            architecture: Architecture::Mlp { hidden: vec![16, 16] },
            batch_size: 16,
            gradient_steps: 60,
            replay: ReplayConfig {
                capacity: 2000,
                min_fill: 50,
                ..ReplayConfig::default()
            },
            log_every: 20,
            validation_every: 30,
            validation_instances: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_training_table() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 5e-5);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.steps_per_update, 10);
        assert_eq!(c.tau, 1e-4);
        assert_eq!(c.replay.capacity, 100_000);
        assert_eq!(c.replay.min_fill, 20_000);
        assert_eq!(c.target.k, 3);
        assert_eq!(c.target.reward_per_transition, -1.0);
        assert_eq!(c.architecture, Architecture::Mlp { hidden: vec![64, 64] });
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 7, "gradient_steps": 5}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.batch_size, 128);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let a = train(&quick(3)).unwrap();
        let b = train(&quick(3)).unwrap();
        assert_eq!(a.gradient_steps, 60);
        assert_eq!(a.online.params, b.online.params);
        assert_eq!(a.curves, b.curves);
        assert!(a.curves.iter().any(|p| p.validation_geomean.is_some()));
        let c = train(&quick(4)).unwrap();
        assert_ne!(a.online.params, c.online.params);
    }

    #[test]
    fn no_gradient_steps_below_min_fill() {
        let config = TrainConfig {
            max_episodes: Some(20),
            replay: ReplayConfig {
                capacity: 10_000,
                min_fill: 10_000,
                ..ReplayConfig::default()
            },
            ..quick(1)
        };
        let out = train(&config).unwrap();
        assert_eq!(out.gradient_steps, 0);
        assert_eq!(out.episodes, 20);
        assert!(out.agent_steps > 0);
        assert_eq!(out.curves.last().unwrap().mean_loss, None);
    }

    #[test]
    fn every_target_variant_trains() {
        for loss in [LossKind::Mse, LossKind::HlGaussCe] {
            for kind in [TargetKind::Bbmdp, TargetKind::TreeMdp] {
                for arch in [Architecture::Linear, Architecture::Mlp { hidden: vec![8] }] {
                    let mut c = quick(2);
                    c.target.loss = loss;
                    c.target.kind = kind;
                    c.target.k = 2;
                    c.architecture = arch;
                    c.gradient_steps = 20;
                    c.validation_every = 0;
                    let out = train(&c).unwrap();
                    assert_eq!(out.gradient_steps, 20);
                    assert!(out.online.params.iter().all(|p| p.is_finite()));
                }
            }
        }
    }

    #[test]
    fn checkpoint_restores_the_scorer() {
        let out = train(&TrainConfig { gradient_steps: 10, validation_every: 0, ..quick(5) }).unwrap();
        let bytes = checkpoint::encode(&out.checkpoint);
        let back = checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.qfn, out.online);
        assert_eq!(back.config_digest, TrainConfig { gradient_steps: 10, validation_every: 0, ..quick(5) }.digest());
        let seeds = [11, 12];
        let family = gen::preset_family("tiny", "setcover").unwrap();
        let codec = HistogramCodec::default();
        let a = greedy_tree_sizes(&LearnedScorer::new(out.online, codec, "a"), family, &seeds, 1000).unwrap();
        let b = greedy_tree_sizes(&LearnedScorer::new(back.qfn, codec, "b"), family, &seeds, 1000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { tau: 2.0, ..TrainConfig::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.target.k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn geometric_mean_of_powers() {
        assert!((geometric_mean(&[2.0, 8.0]) - 4.0).abs() < 1e-12);
        assert!((geometric_mean(&[5.0]) - 5.0).abs() < 1e-12);
    }
}
