//! Value network: a fully connected regressor from (state, action) features to
//! the predicted episode outcome, trained with momentum gradient descent on
//! squared error. Lower predictions are better.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EnvConfig};
use crate::persist::{load_versioned, save_versioned};
use crate::{Error, Result};

/// Dense layers; `weights[l]` is row-major `sizes[l + 1] x sizes[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity_weights: Vec<Vec<f64>>,
    pub velocity_biases: Vec<Vec<f64>>,
    pub steps: u64,
}

impl NetworkParams {
    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }

    fn zeros_like(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        )
    }

    /// Checks that the tensor shapes chain from `sizes`.
    pub fn check(&self) -> Result<()> {
        let ok = self.sizes.len() >= 2
            && self.sizes.iter().all(|&s| s > 0)
            && *self.sizes.last().unwrap() == 1
            && self.weights.len() == self.sizes.len() - 1
            && self.biases.len() == self.weights.len()
            && (0..self.weights.len()).all(|l| {
                self.weights[l].len() == self.sizes[l] * self.sizes[l + 1] && self.biases[l].len() == self.sizes[l + 1]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::contract("network tensor shapes do not match layer sizes"))
        }
    }
}

impl TrainerState {
    pub fn new(params: &NetworkParams, learning_rate: f64, momentum: f64) -> Self {
        let (velocity_weights, velocity_biases) = params.zeros_like();
        TrainerState {
            learning_rate,
            momentum,
            velocity_weights,
            velocity_biases,
            steps: 0,
        }
    }

    pub fn reset_velocity(&mut self) {
        self.velocity_weights.iter_mut().flatten().for_each(|v| *v = 0.0);
        self.velocity_biases.iter_mut().flatten().for_each(|v| *v = 0.0);
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_network(input_size: usize, hidden: &[usize], seed: u64) -> Result<NetworkParams> {
    if input_size == 0 || hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::contract("network sizes must be nonzero and hidden layers nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![input_size];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(NetworkParams { sizes, weights, biases })
}

/// Activations of every layer, input first; hidden layers are post-ReLU.
fn forward(params: &NetworkParams, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(params.sizes.len());
    acts.push(x.to_vec());
    let last = params.layers() - 1;
    for l in 0..params.layers() {
        let input = &acts[l];
        let n_in = params.sizes[l];
        let w = &params.weights[l];
        let mut out = params.biases[l].clone();
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            *slot += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            if l < last && *slot < 0.0 {
                *slot = 0.0;
            }
        }
        acts.push(out);
    }
    acts
}

pub fn predict(params: &NetworkParams, features: &[f64]) -> Result<f64> {
    if features.len() != params.input_len() {
        return Err(Error::contract(format!(
            "feature length {} does not match network input {}",
            features.len(),
            params.input_len()
        )));
    }
    Ok(forward(params, features).last().unwrap()[0])
}

/// Accumulates `scale * dL/dθ` for the squared error of one sample; returns the error.
fn backward(
    params: &NetworkParams,
    x: &[f64],
    target: f64,
    scale: f64,
    gw: &mut [Vec<f64>],
    gb: &mut [Vec<f64>],
) -> f64 {
    let acts = forward(params, x);
    let err = acts.last().unwrap()[0] - target;
    let mut delta = vec![2.0 * err * scale];
    for l in (0..params.layers()).rev() {
        let n_in = params.sizes[l];
        let input = &acts[l];
        let w = &params.weights[l];
        let mut prev = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[l][o] += d;
            let grow = &mut gw[l][o * n_in..(o + 1) * n_in];
            for (g, a) in grow.iter_mut().zip(input) {
                *g += d * a;
            }
            if l > 0 {
                for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wv;
                }
            }
        }
        if l > 0 {
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev;
    }
    err
}

/// Gradient of the mean squared error over a batch.
fn batch_gradient(params: &NetworkParams, batch: &[(Vec<f64>, f64)]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (mut gw, mut gb) = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (x, t) in batch {
        let e = backward(params, x, *t, scale, &mut gw, &mut gb);
        loss += e * e * scale;
    }
    (loss, gw, gb)
}

fn check_batch(params: &NetworkParams, batch: &[(Vec<f64>, f64)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    for (x, t) in batch {
        if x.len() != params.input_len() {
            return Err(Error::contract("feature length does not match network input"));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite training sample"));
        }
    }
    Ok(())
}

/// One momentum step on the batch mean squared error; returns the pre-step loss.
pub fn train_batch(params: &mut NetworkParams, state: &mut TrainerState, batch: &[(Vec<f64>, f64)]) -> Result<f64> {
    check_batch(params, batch)?;
    let (loss, gw, gb) = batch_gradient(params, batch);
    let (mu, lr) = (state.momentum, state.learning_rate);
    let update = |theta: &mut [Vec<f64>], vel: &mut [Vec<f64>], grad: &[Vec<f64>]| {
        for ((t, v), g) in theta.iter_mut().zip(vel.iter_mut()).zip(grad) {
            for ((ti, vi), gi) in t.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi - lr * gi;
                *ti += *vi;
            }
        }
    };
    update(&mut params.weights, &mut state.velocity_weights, &gw);
    update(&mut params.biases, &mut state.velocity_biases, &gb);
    state.steps += 1;
    Ok(loss)
}

/// Mean squared error without updating anything.
pub fn evaluate_loss(params: &NetworkParams, batch: &[(Vec<f64>, f64)]) -> Result<f64> {
    check_batch(params, batch)?;
    let mut loss = 0.0;
    for (x, t) in batch {
        let e = forward(params, x).last().unwrap()[0] - t;
        loss += e * e;
    }
    Ok(loss / batch.len() as f64)
}

const FD_STEP: f64 = 1e-5;
const GRADIENT_FLOOR: f64 = 1e-10;

/// Largest relative error between backprop and central differences over all parameters.
pub fn gradient_check(params: &NetworkParams, features: &[f64], target: f64) -> f64 {
    gradient_check_with(params, features, target, |p, x, t| {
        let (_, gw, gb) = batch_gradient(p, &[(x.to_vec(), t)]);
        (gw, gb)
    })
}

pub(crate) fn gradient_check_with<G>(params: &NetworkParams, features: &[f64], target: f64, analytic: G) -> f64
where
    G: Fn(&NetworkParams, &[f64], f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>),
{
    let (gw, gb) = analytic(params, features, target);
    let loss = |p: &NetworkParams| {
        let e = forward(p, features).last().unwrap()[0] - target;
        e * e
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut compare = |a: f64, n: f64| {
        let m = a.abs().max(n.abs());
        if m >= GRADIENT_FLOOR {
            worst = worst.max((a - n).abs() / m);
        }
    };
    for l in 0..params.layers() {
        for i in 0..params.weights[l].len() {
            let orig = probe.weights[l][i];
            probe.weights[l][i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.weights[l][i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.weights[l][i] = orig;
            compare(gw[l][i], (up - down) / (2.0 * FD_STEP));
        }
        for i in 0..params.biases[l].len() {
            let orig = probe.biases[l][i];
            probe.biases[l][i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.biases[l][i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.biases[l][i] = orig;
            compare(gb[l][i], (up - down) / (2.0 * FD_STEP));
        }
    }
    worst
}

/// Epsilon-greedy over predicted values: argmin (ties to the smallest index)
/// with probability `1 - epsilon`, otherwise uniform among the other actions.
pub fn select_index<R: Rng + ?Sized>(
    params: &NetworkParams,
    features: &[Vec<f64>],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::contract("no legal actions to choose from"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut best = 0;
    let mut best_value = f64::INFINITY;
    for (i, f) in features.iter().enumerate() {
        let v = predict(params, f)?;
        if v < best_value {
            best = i;
            best_value = v;
        }
    }
    if features.len() > 1 && epsilon > 0.0 && rng.random_bool(epsilon) {
        let pick = rng.random_range(0..features.len() - 1);
        return Ok(if pick >= best { pick + 1 } else { pick });
    }
    Ok(best)
}

pub fn select_action<R: Rng + ?Sized>(
    params: &NetworkParams,
    env: &Env<'_>,
    legal: &[Action],
    epsilon: f64,
    rng: &mut R,
) -> Result<Action> {
    let features = env.featurize_all(legal);
    let i = select_index(params, &features, epsilon, rng)?;
    Ok(legal[i].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of a run over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![128, 64],
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epsilon_start: 0.2,
            epsilon_end: 0.01,
            epsilon_decay_fraction: 0.5,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("agent.hidden", "needs at least one nonzero layer size"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("agent.learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("agent.momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("agent.batch_size", "must be positive"));
        }
        for (field, e) in [("agent.epsilon_start", self.epsilon_start), ("agent.epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config(field, "must be in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return Err(Error::config("agent.epsilon_decay_fraction", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Linear decay from start to end over the first `epsilon_decay_fraction` of `total` episodes.
    pub fn epsilon_at(&self, episode: usize, total: usize) -> f64 {
        let span = self.epsilon_decay_fraction * total as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let t = episode as f64 / span;
        if t >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

/// A value network plus its optimizer state and target normalization.
///
/// Raw targets (costs, seconds) are trained as `ln(1 + t) / ln(1 + cap)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub params: NetworkParams,
    pub trainer: TrainerState,
    pub target_cap: Option<f64>,
}

impl Agent {
    pub fn new(config: AgentConfig, feature_len: usize) -> Result<Self> {
        config.validate()?;
        let params = init_network(feature_len, &config.hidden, config.seed)?;
        let trainer = TrainerState::new(&params, config.learning_rate, config.momentum);
        Ok(Agent {
            config,
            params,
            trainer,
            target_cap: None,
        })
    }

    pub fn for_env(config: AgentConfig, env: &EnvConfig) -> Result<Self> {
        Self::new(config, env.feature_len())
    }

    /// Fixes the normalization scale to the 99th percentile of `targets`.
    pub fn calibrate_targets(&mut self, targets: &[f64]) {
        let mut v: Vec<f64> = targets.iter().copied().filter(|t| t.is_finite()).map(|t| t.max(0.0)).collect();
        if v.is_empty() {
            return;
        }
        v.sort_by(f64::total_cmp);
        let i = ((v.len() - 1) as f64 * 0.99).round() as usize;
        self.target_cap = Some(v[i].max(1e-9));
    }

    pub fn normalize(&self, target: f64) -> f64 {
        let cap = self.target_cap.unwrap_or(1.0);
        (1.0 + target.max(0.0)).ln() / (1.0 + cap).ln()
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        let cap = self.target_cap.unwrap_or(1.0);
        (value * (1.0 + cap).ln()).exp() - 1.0
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        predict(&self.params, features)
    }

    /// Trains on raw targets; returns the pre-step loss in normalized space.
    pub fn train(&mut self, batch: &[(Vec<f64>, f64)]) -> Result<f64> {
        if batch.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::contract("non-finite training target"));
        }
        let normalized: Vec<(Vec<f64>, f64)> = batch.iter().map(|(x, t)| (x.clone(), self.normalize(*t))).collect();
        train_batch(&mut self.params, &mut self.trainer, &normalized)
    }

    pub fn loss(&self, batch: &[(Vec<f64>, f64)]) -> Result<f64> {
        let normalized: Vec<(Vec<f64>, f64)> = batch.iter().map(|(x, t)| (x.clone(), self.normalize(*t))).collect();
        evaluate_loss(&self.params, &normalized)
    }

    pub fn select_action<R: Rng + ?Sized>(
        &self,
        env: &Env<'_>,
        legal: &[Action],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Action> {
        select_action(&self.params, env, legal, epsilon, rng)
    }

    /// Replaces every parameter with a fresh random draw (keeps shapes and optimizer).
    pub fn randomize(&mut self, seed: u64) {
        let hidden = &self.params.sizes[1..self.params.sizes.len() - 1];
        self.params = init_network(self.params.input_len(), hidden, seed).expect("shapes already valid");
        self.trainer.reset_velocity();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub episodes_seen: u64,
    pub seeds: BTreeMap<String, u64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub env_fingerprint: String,
    pub env: EnvConfig,
    pub agent: Agent,
    pub metadata: CheckpointMetadata,
}

pub const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn new(agent: &Agent, env: &EnvConfig, metadata: CheckpointMetadata) -> Self {
        Checkpoint {
            env_fingerprint: env.fingerprint(),
            env: env.clone(),
            agent: agent.clone(),
            metadata,
        }
    }
}

pub fn save_checkpoint(path: &Path, agent: &Agent, env: &EnvConfig, metadata: CheckpointMetadata) -> Result<()> {
    save_versioned(path, CHECKPOINT_KIND, &Checkpoint::new(agent, env, metadata))
}

/// Loads a checkpoint and verifies it was trained for `env`'s encoding.
pub fn load_checkpoint(path: &Path, env: &EnvConfig) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    let expected = env.fingerprint();
    if ck.env_fingerprint != expected {
        return Err(Error::Fingerprint {
            found: ck.env_fingerprint,
            expected,
        });
    }
    Ok(ck)
}

/// Loads a checkpoint without an environment to compare against.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = load_versioned(path, CHECKPOINT_KIND)?;
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    ck.agent.params.check().map_err(|_| malformed("inconsistent network shapes"))?;
    if ck.agent.params.input_len() != ck.env.feature_len() || ck.env_fingerprint != ck.env.fingerprint() {
        return Err(malformed("environment record does not match the network"));
    }
    Ok(ck)
}
