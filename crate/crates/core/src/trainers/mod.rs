//! Training regimes over a fixed simulated world.
//!
//! Every trainer shares one episode loop ([`Session`]): round-robin query
//! choice, an epsilon-greedy rollout, expert completion of undecided stages,
//! and regression of the episode's terminal outcome onto every
//! (state, action) pair the agent visited. Predictions are of outcome
//! magnitudes (cost, seconds or scaled seconds), so lower is better.

pub mod bootstrap;
pub mod curriculum;
pub mod eval;
pub mod lfd;

use std::collections::hash_map::Entry;
use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{select_index, Agent};
use crate::catalog::{Catalog, Query};
use crate::costmodel::{cost_plan, simulate_latency, LatencyModel};
use crate::env::{Env, EnvConfig, RewardSpec};
use crate::expert::optimize_dp;
use crate::plans::PhysicalPlan;
use crate::{Error, Result};

pub use bootstrap::{calibrate_bootstrap, detect_convergence, scale_latency_reward, train_bootstrap, BootstrapCalibration};
pub use curriculum::{next_phase, train_curriculum, CurriculumKind, CurriculumPhase, CurriculumSchedule, PhaseDecision};
pub use eval::{evaluate_agent, evaluate_plans, EvalReport, EvalRow};
pub use lfd::{expert_agreement, finetune_lfd, pretrain_from_demonstration, SlipDetector};

/// The immutable inputs of a training run.
#[derive(Debug, Clone, Copy)]
pub struct World<'a> {
    pub catalog: &'a Catalog,
    pub latency: &'a LatencyModel,
    pub queries: &'a [Query],
}

/// Per-episode latency budget; slower plans are recorded as timeouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TimeoutBudget {
    Infinite,
    /// A multiple of the expert plan's latency under the same execution seed.
    ExpertMultiple(f64),
    Seconds(f64),
}

impl TimeoutBudget {
    pub fn seconds(self, expert_latency: f64) -> f64 {
        match self {
            TimeoutBudget::Infinite => f64::INFINITY,
            TimeoutBudget::ExpertMultiple(k) => k * expert_latency,
            TimeoutBudget::Seconds(s) => s,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            TimeoutBudget::Infinite => Ok(()),
            TimeoutBudget::ExpertMultiple(v) | TimeoutBudget::Seconds(v) if v > 0.0 => Ok(()),
            _ => Err(Error::config("trainer.timeout", "budget must be positive")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub episodes: usize,
    /// Episodes collected before the first update; also sets the target scale of an uncalibrated agent.
    pub warmup_episodes: usize,
    pub updates_per_episode: usize,
    pub replay_capacity: usize,
    pub execution_seed: u64,
    pub timeout: TimeoutBudget,
    /// Overrides the agent's epsilon schedule when set.
    pub epsilon: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            episodes: 1000,
            warmup_episodes: 50,
            updates_per_episode: 1,
            replay_capacity: 20_000,
            execution_seed: 0,
            timeout: TimeoutBudget::Infinite,
            epsilon: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.replay_capacity == 0 {
            return Err(Error::config("trainer.replay_capacity", "must be positive"));
        }
        if let Some(e) = self.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config("trainer.epsilon", "must be in [0, 1]"));
            }
        }
        self.timeout.validate()
    }

    fn epsilon_for(&self, agent: &Agent, episode: usize, total: usize) -> f64 {
        self.epsilon.unwrap_or_else(|| agent.config.epsilon_at(episode, total))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub phase: String,
    pub query_id: u32,
    pub agent_cost: f64,
    pub expert_cost: f64,
    pub cost_ratio: f64,
    pub latency_s: f64,
    pub expert_latency_s: f64,
    pub latency_ratio: f64,
    /// Mean pre-step loss of this episode's updates; NaN when nothing was trained.
    pub loss: f64,
    pub epsilon: f64,
    pub timeout: bool,
    pub reward: f64,
    pub join_actions: usize,
    pub slip_active: bool,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str =
    "episode,phase,query_id,agent_cost,expert_cost,cost_ratio,latency_s,expert_latency_s,latency_ratio,loss,epsilon,timeout_flag";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<EpisodeRecord>,
    /// Notable run events, e.g. a phase ending on its budget.
    pub flags: Vec<String>,
}

impl Metrics {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: Metrics) {
        self.records.extend(other.records);
        self.flags.extend(other.flags);
    }

    pub fn timeouts(&self) -> usize {
        self.records.iter().filter(|r| r.timeout).count()
    }

    pub fn cost_ratios(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost_ratio).collect()
    }

    /// Median cost ratio over the last `window` records.
    pub fn tail_median_cost_ratio(&self, window: usize) -> Option<f64> {
        let start = self.records.len().saturating_sub(window);
        median(&self.records[start..].iter().map(|r| r.cost_ratio).collect::<Vec<_>>())
    }

    /// Comma-separated rows under [`METRICS_HEADER`]; wall-clock time is left out so the text is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.episode,
                r.phase,
                r.query_id,
                r.agent_cost,
                r.expert_cost,
                r.cost_ratio,
                r.latency_s,
                r.expert_latency_s,
                r.latency_ratio,
                r.loss,
                r.epsilon,
                u8::from(r.timeout)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// SplitMix64 finalizer; derives independent per-episode seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// DP plans and costs per query id, computed once.
#[derive(Debug, Default)]
pub(crate) struct ExpertCache {
    plans: HashMap<u32, (PhysicalPlan, f64)>,
}

impl ExpertCache {
    pub(crate) fn get(&mut self, catalog: &Catalog, query: &Query) -> Result<&(PhysicalPlan, f64)> {
        match self.plans.entry(query.id) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => {
                let plan = optimize_dp(catalog, query)?;
                let cost = cost_plan(catalog, query, &plan)?.value();
                Ok(e.insert((plan, cost)))
            }
        }
    }
}

pub(crate) type Sample = (Vec<f64>, f64);

/// Per-episode settings that vary between trainers and phases.
pub(crate) struct EpisodeSpec<'s> {
    pub env: &'s EnvConfig,
    pub epsilon: f64,
    pub phase: &'s str,
    pub timeout: TimeoutBudget,
    /// Expert samples mixed into each batch at the given fraction, when set.
    pub mix: Option<(&'s [Sample], f64)>,
    pub slip_active: bool,
}

/// The episode loop shared by all trainers: exploration RNG, replay buffer,
/// expert cache and the global episode counter.
pub(crate) struct Session<'w> {
    pub world: World<'w>,
    options: TrainOptions,
    expert: ExpertCache,
    replay: VecDeque<Sample>,
    rng: ChaCha8Rng,
    pub episode: u64,
    warmup_targets: Vec<f64>,
    warmup_seen: usize,
    started: Instant,
}

impl<'w> Session<'w> {
    pub(crate) fn new(world: World<'w>, options: TrainOptions, agent: &Agent) -> Result<Self> {
        options.validate()?;
        if world.queries.is_empty() {
            return Err(Error::config("workload", "no queries to train on"));
        }
        Ok(Session {
            world,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(agent.config.seed, options.execution_seed)),
            options,
            expert: ExpertCache::default(),
            replay: VecDeque::new(),
            episode: 0,
            warmup_targets: Vec::new(),
            warmup_seen: 0,
            started: Instant::now(),
        })
    }

    pub(crate) fn clear_replay(&mut self) {
        self.replay.clear();
    }

    fn execution_seed(&self) -> u64 {
        mix_seed(self.options.execution_seed, self.episode)
    }

    /// Plays one episode on `query` and trains on the replay buffer afterwards.
    pub(crate) fn run(&mut self, agent: &mut Agent, query: &Query, spec: &EpisodeSpec<'_>) -> Result<EpisodeRecord> {
        let World { catalog, latency, .. } = self.world;
        let (mut env, mut legal) = Env::reset(spec.env.clone(), catalog, latency, query)?;
        let mut visited = Vec::new();
        let mut join_actions = 0;
        while !env.state().terminal {
            let mut features = env.featurize_all(&legal);
            let i = select_index(&agent.params, &features, spec.epsilon, &mut self.rng)?;
            join_actions += usize::from(legal[i].kind.is_join());
            env.step(&legal[i])?;
            visited.push(features.swap_remove(i));
            if !env.state().terminal {
                legal = env.legal_actions()?;
            }
        }
        let plan = env.extract_plan()?;
        let agent_cost = cost_plan(catalog, query, &plan)?.value();
        let seed = self.execution_seed();
        let seconds = simulate_latency(latency, catalog, query, &plan, seed)?.seconds;
        let (expert_plan, expert_cost) = self.expert.get(catalog, query)?.clone();
        let expert_seconds = simulate_latency(latency, catalog, query, &expert_plan, seed)?.seconds;

        let budget = spec.timeout.seconds(expert_seconds);
        let timeout = seconds > budget;
        let observed = seconds.min(budget);
        let target = match &spec.env.reward {
            RewardSpec::Cost => agent_cost,
            RewardSpec::Latency => observed,
            RewardSpec::ScaledLatency { calibration } => {
                let cal = calibration
                    .as_ref()
                    .ok_or_else(|| Error::contract("scaled-latency reward needs a calibration"))?;
                scale_latency_reward(cal, observed)
            }
        };

        for f in visited {
            if self.replay.len() == self.options.replay_capacity {
                self.replay.pop_front();
            }
            self.replay.push_back((f, target));
        }
        // no updates during warm-up, even for an agent that arrives calibrated
        self.warmup_seen += 1;
        let warm = self.warmup_seen >= self.options.warmup_episodes.max(1);
        if agent.target_cap.is_none() {
            self.warmup_targets.push(target);
            if warm {
                agent.calibrate_targets(&self.warmup_targets);
            }
        }
        let loss = if warm && agent.target_cap.is_some() { self.update(agent, spec.mix)? } else { f64::NAN };

        let record = EpisodeRecord {
            episode: self.episode,
            phase: spec.phase.to_string(),
            query_id: query.id,
            agent_cost,
            expert_cost,
            cost_ratio: agent_cost / expert_cost,
            latency_s: seconds,
            expert_latency_s: expert_seconds,
            latency_ratio: seconds / expert_seconds,
            loss,
            epsilon: spec.epsilon,
            timeout,
            reward: -target,
            join_actions,
            slip_active: spec.slip_active,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        self.episode += 1;
        Ok(record)
    }

    /// Minibatch updates from the replay buffer; returns the mean loss.
    fn update(&mut self, agent: &mut Agent, mix: Option<(&[Sample], f64)>) -> Result<f64> {
        if self.replay.is_empty() || self.options.updates_per_episode == 0 {
            return Ok(f64::NAN);
        }
        let size = agent.config.batch_size;
        let mut total = 0.0;
        for _ in 0..self.options.updates_per_episode {
            let mut batch = Vec::with_capacity(size);
            for _ in 0..size {
                let from_expert = match mix {
                    Some((pool, fraction)) if !pool.is_empty() => self.rng.random_bool(fraction),
                    _ => false,
                };
                if from_expert {
                    let pool = mix.unwrap().0;
                    batch.push(pool[self.rng.random_range(0..pool.len())].clone());
                } else {
                    batch.push(self.replay[self.rng.random_range(0..self.replay.len())].clone());
                }
            }
            total += agent.train(&batch)?;
        }
        Ok(total / self.options.updates_per_episode as f64)
    }
}

/// Queries eligible for an environment, in workload order.
pub(crate) fn eligible(queries: &[Query], max_relations: usize) -> Vec<&Query> {
    queries.iter().filter(|q| q.len() <= max_relations).collect()
}

fn run_plain(
    world: World<'_>,
    agent: &mut Agent,
    env: &EnvConfig,
    options: &TrainOptions,
    phase: &str,
) -> Result<Metrics> {
    env.validate()?;
    let mut metrics = Metrics::default();
    if options.episodes == 0 {
        return Ok(metrics);
    }
    let queries = eligible(world.queries, env.max_relations);
    if queries.is_empty() {
        return Err(Error::config("env.max_relations", "no workload query fits the environment"));
    }
    let mut session = Session::new(world, options.clone(), agent)?;
    for i in 0..options.episodes {
        let spec = EpisodeSpec {
            env,
            epsilon: options.epsilon_for(agent, i, options.episodes),
            phase,
            timeout: options.timeout,
            mix: None,
            slip_active: false,
        };
        let q = queries[i % queries.len()];
        metrics.records.push(session.run(agent, q, &spec)?);
    }
    Ok(metrics)
}

/// Cost-model reward; the baseline every other regime is compared against.
pub fn train_vanilla_cost(world: World<'_>, agent: &mut Agent, env: &EnvConfig, options: &TrainOptions) -> Result<Metrics> {
    if env.reward != RewardSpec::Cost {
        return Err(Error::contract("vanilla training uses the cost reward"));
    }
    run_plain(world, agent, env, options, "vanilla")
}

/// Raw simulated latency as reward, with plans slower than the budget cut off.
pub fn train_naive_latency(
    world: World<'_>,
    agent: &mut Agent,
    env: &EnvConfig,
    options: &TrainOptions,
) -> Result<Metrics> {
    if env.reward != RewardSpec::Latency {
        return Err(Error::contract("naive latency training uses the latency reward"));
    }
    run_plain(world, agent, env, options, "naive-latency")
}
