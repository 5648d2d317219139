//! Learning from demonstration: regress expert episodes onto their observed
//! latency, then fine-tune on the agent's own latencies with expert samples
//! mixed back in while performance has slipped.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eligible, median, EpisodeSpec, Metrics, Sample, Session, TrainOptions, World};
use crate::agent::{select_index, Agent};
use crate::catalog::Query;
use crate::env::{Env, EnvConfig, RewardSpec};
use crate::expert::{record_episode, EpisodeHistory, ExpertKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlipConfig {
    pub window: usize,
    pub tau: f64,
    pub recovery: f64,
}

impl Default for SlipConfig {
    fn default() -> Self {
        SlipConfig {
            window: 50,
            tau: 1.2,
            recovery: 1.05,
        }
    }
}

/// Watches the window median of expert-relative latency ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SlipDetector {
    config: SlipConfig,
    ratios: VecDeque<f64>,
    active: bool,
}

impl SlipDetector {
    pub fn new(config: SlipConfig) -> Result<Self> {
        if config.window == 0 {
            return Err(Error::config("slip.window", "must be at least 1"));
        }
        if !(config.recovery >= 1.0 && config.tau > config.recovery) {
            return Err(Error::config("slip.tau", "needs tau > recovery >= 1"));
        }
        Ok(SlipDetector {
            config,
            ratios: VecDeque::with_capacity(config.window),
            active: false,
        })
    }

    /// Ingests one ratio; returns whether the full window's median exceeds tau.
    pub fn observe(&mut self, ratio: f64) -> bool {
        if self.ratios.len() == self.config.window {
            self.ratios.pop_front();
        }
        self.ratios.push_back(ratio);
        if self.ratios.len() < self.config.window {
            return false;
        }
        let m = median(self.ratios.make_contiguous()).expect("window is full");
        let slipped = m > self.config.tau;
        if slipped {
            self.active = true;
        } else if self.active && m <= self.config.recovery {
            self.active = false;
        }
        slipped
    }

    /// Between a slip and the following recovery.
    pub fn is_active(&self) -> bool {
        self.active
    }
}

/// Records the expert's episode for every query and executes its plan once.
pub fn record_corpus(
    world: World<'_>,
    env: &EnvConfig,
    expert: ExpertKind,
    execution_seed: u64,
) -> Result<Vec<EpisodeHistory>> {
    eligible(world.queries, env.max_relations)
        .into_iter()
        .map(|q| {
            let mut h = record_episode(env, world.catalog, world.latency, q, expert)?;
            h.execute(world.latency, world.catalog, q, super::mix_seed(execution_seed, u64::from(q.id)))?;
            Ok(h)
        })
        .collect()
}

fn query_for<'q>(world: &World<'q>, id: u32) -> Result<&'q Query> {
    world
        .queries
        .iter()
        .find(|q| q.id == id)
        .ok_or_else(|| Error::contract(format!("history refers to unknown query {id}")))
}

/// One `(features(s_i, a_i), L_q)` sample per recorded step.
pub fn demonstration_samples(world: World<'_>, env: &EnvConfig, histories: &[EpisodeHistory]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for h in histories {
        let latency = h
            .latency_s
            .ok_or_else(|| Error::contract(format!("history for query {} has no observed latency", h.query_id)))?;
        let q = query_for(&world, h.query_id)?;
        let (mut e, _) = Env::reset(env.clone(), world.catalog, world.latency, q)?;
        for step in &h.steps {
            out.push((e.featurize(&step.action)?, latency));
            e.step(&step.action)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub passes: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Used only while pretraining; the agent's own rate is restored afterwards.
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            passes: 20,
            holdout_fraction: 0.1,
            seed: 0,
            learning_rate: 1e-2,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss of the last pass.
    pub final_loss: f64,
    /// Held-out loss after each pass.
    pub heldout_losses: Vec<f64>,
    pub train_histories: Vec<EpisodeHistory>,
    pub heldout_histories: Vec<EpisodeHistory>,
}

/// Splits histories by query, trains on the larger part for `passes` epochs.
pub fn pretrain_from_demonstration(
    world: World<'_>,
    env: &EnvConfig,
    agent: &mut Agent,
    histories: &[EpisodeHistory],
    options: &PretrainOptions,
) -> Result<PretrainReport> {
    if histories.is_empty() {
        return Err(Error::contract("empty demonstration log"));
    }
    if !(0.0..1.0).contains(&options.holdout_fraction) {
        return Err(Error::config("pretrain.holdout_fraction", "must be in [0, 1)"));
    }
    if !(options.learning_rate.is_finite() && options.learning_rate > 0.0) {
        return Err(Error::config("pretrain.learning_rate", "must be positive"));
    }
    if options.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..histories.len()).collect();
    order.shuffle(&mut rng);
    let holdout = if histories.len() > 1 {
        ((histories.len() as f64 * options.holdout_fraction).round() as usize).min(histories.len() - 1)
    } else {
        0
    };
    let heldout_histories: Vec<_> = order[..holdout].iter().map(|&i| histories[i].clone()).collect();
    let train_histories: Vec<_> = order[holdout..].iter().map(|&i| histories[i].clone()).collect();
    let mut train = demonstration_samples(world, env, &train_histories)?;
    let heldout = demonstration_samples(world, env, &heldout_histories)?;
    let mut report = PretrainReport {
        final_loss: f64::NAN,
        heldout_losses: Vec::new(),
        train_histories,
        heldout_histories,
    };
    if options.passes == 0 || train.is_empty() {
        return Ok(report);
    }
    if agent.target_cap.is_none() {
        let targets: Vec<f64> = train.iter().map(|s| s.1).collect();
        agent.calibrate_targets(&targets);
    }
    let own_rate = agent.trainer.learning_rate;
    agent.trainer.learning_rate = options.learning_rate;
    let result = (|| {
        for _ in 0..options.passes {
            train.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for batch in train.chunks(options.batch_size) {
                total += agent.train(batch)?;
                batches += 1;
            }
            report.final_loss = total / batches as f64;
            if !heldout.is_empty() {
                report.heldout_losses.push(agent.loss(&heldout)?);
            }
        }
        Ok(())
    })();
    agent.trainer.learning_rate = own_rate;
    agent.trainer.reset_velocity();
    result.map(|()| report)
}

/// Fraction of recorded decisions where the agent's greedy choice is consistent
/// with the expert's plan; any expert join available in the state counts.
pub fn expert_agreement(world: World<'_>, env: &EnvConfig, agent: &Agent, histories: &[EpisodeHistory]) -> Result<f64> {
    let mut agree = 0usize;
    let mut total = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for h in histories {
        let q = query_for(&world, h.query_id)?;
        let (mut e, _) = Env::reset(env.clone(), world.catalog, world.latency, q)?;
        let target = e.extract_target(&h.terminal_plan)?;
        for step in &h.steps {
            let legal = e.legal_actions()?;
            let features = e.featurize_all(&legal);
            let i = select_index(&agent.params, &features, 0.0, &mut rng)?;
            agree += usize::from(e.consistent_with(&legal[i], &target));
            total += 1;
            e.step(&step.action)?;
        }
    }
    if total == 0 {
        return Err(Error::contract("no recorded decisions to compare against"));
    }
    Ok(agree as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneOptions {
    pub train: TrainOptions,
    pub slip: SlipConfig,
    /// Share of each batch drawn from the demonstrations while slipping.
    pub mix_fraction: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            train: TrainOptions {
                epsilon: Some(0.0),
                ..TrainOptions::default()
            },
            slip: SlipConfig::default(),
            mix_fraction: 0.25,
        }
    }
}

pub const FINETUNE_PHASE: &str = "lfd-finetune";

pub fn finetune_lfd(
    world: World<'_>,
    agent: &mut Agent,
    env: &EnvConfig,
    demonstrations: &[Sample],
    options: &FinetuneOptions,
) -> Result<Metrics> {
    finetune_lfd_with(world, agent, env, demonstrations, options, |_, _| {})
}

/// As [`finetune_lfd`], calling `before_episode(i, agent)` ahead of every episode.
pub fn finetune_lfd_with<F>(
    world: World<'_>,
    agent: &mut Agent,
    env: &EnvConfig,
    demonstrations: &[Sample],
    options: &FinetuneOptions,
    mut before_episode: F,
) -> Result<Metrics>
where
    F: FnMut(usize, &mut Agent),
{
    env.validate()?;
    if env.reward != RewardSpec::Latency {
        return Err(Error::contract("fine-tuning uses the latency reward"));
    }
    if !(0.0..=1.0).contains(&options.mix_fraction) {
        return Err(Error::config("lfd.mix_fraction", "must be in [0, 1]"));
    }
    let mut detector = SlipDetector::new(options.slip)?;
    let mut metrics = Metrics::default();
    let episodes = options.train.episodes;
    if episodes == 0 {
        return Ok(metrics);
    }
    let queries = eligible(world.queries, env.max_relations);
    if queries.is_empty() {
        return Err(Error::config("env.max_relations", "no workload query fits the environment"));
    }
    let mut session = Session::new(world, options.train.clone(), agent)?;
    for i in 0..episodes {
        before_episode(i, agent);
        let active = detector.is_active();
        let spec = EpisodeSpec {
            env,
            epsilon: options.train.epsilon_for(agent, i, episodes),
            phase: FINETUNE_PHASE,
            timeout: options.train.timeout,
            mix: active.then_some((demonstrations, options.mix_fraction)),
            slip_active: active,
        };
        let record = session.run(agent, queries[i % queries.len()], &spec)?;
        if detector.observe(record.latency_ratio) && !active {
            metrics.flags.push(format!("slip detected after episode {}", record.episode));
        }
        metrics.records.push(record);
    }
    Ok(metrics)
}
