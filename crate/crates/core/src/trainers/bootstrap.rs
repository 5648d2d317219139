//! Two-phase training: cost reward until convergence, then latency mapped
//! linearly onto the cost range observed at the end of the first phase.

use serde::{Deserialize, Serialize};

use super::{eligible, EpisodeRecord, EpisodeSpec, Metrics, Session, TrainOptions, World};
use crate::agent::Agent;
use crate::env::{EnvConfig, RewardSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCalibration {
    pub c_min: f64,
    pub c_max: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl BootstrapCalibration {
    pub fn new(c_min: f64, c_max: f64, l_min: f64, l_max: f64) -> Result<Self> {
        let all_finite = [c_min, c_max, l_min, l_max].iter().all(|v| v.is_finite() && *v > 0.0);
        if !all_finite {
            return Err(Error::Calibration("bounds must be finite and positive".into()));
        }
        if c_min >= c_max {
            return Err(Error::Calibration(format!("empty cost range [{c_min}, {c_max}]")));
        }
        if l_min >= l_max {
            return Err(Error::Calibration(format!("empty latency range [{l_min}, {l_max}]")));
        }
        Ok(BootstrapCalibration { c_min, c_max, l_min, l_max })
    }
}

/// Maps seconds onto the calibrated cost scale; values outside the latency
/// range are extrapolated along the same line.
pub fn scale_latency_reward(cal: &BootstrapCalibration, l: f64) -> f64 {
    cal.c_min + (l - cal.l_min) / (cal.l_max - cal.l_min) * (cal.c_max - cal.c_min)
}

/// Extrema of agent costs and latencies over `tail`.
pub fn calibrate_bootstrap(tail: &[EpisodeRecord]) -> Result<BootstrapCalibration> {
    if tail.len() < 2 {
        return Err(Error::Calibration("calibration needs at least two episodes".into()));
    }
    let extrema = |f: fn(&EpisodeRecord) -> f64| {
        tail.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (c_min, c_max) = extrema(|r| r.agent_cost);
    let (l_min, l_max) = extrema(|r| r.latency_s);
    BootstrapCalibration::new(c_min, c_max, l_min, l_max)
}

/// True once the mean of the last `k` values is within `epsilon` (relative) of the `k` before.
pub fn detect_convergence(history: &[f64], k: usize, epsilon: f64) -> bool {
    if k == 0 || history.len() < 2 * k {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&history[n - k..]);
    let prev = mean(&history[n - 2 * k..n - k]);
    (last - prev).abs() <= epsilon * prev.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub train: TrainOptions,
    pub phase1_cap: usize,
    pub phase2_episodes: usize,
    pub convergence_window: usize,
    pub convergence_epsilon: f64,
    pub calibration_window: usize,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            train: TrainOptions::default(),
            phase1_cap: 5000,
            phase2_episodes: 1000,
            convergence_window: 200,
            convergence_epsilon: 0.01,
            calibration_window: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub metrics: Metrics,
    pub calibration: Option<BootstrapCalibration>,
    /// Phase-1 episode count at which convergence was detected.
    pub converged_after: Option<usize>,
}

pub const PHASE1: &str = "phase1";
pub const PHASE2: &str = "phase2";

pub fn train_bootstrap(
    world: World<'_>,
    agent: &mut Agent,
    env: &EnvConfig,
    options: &BootstrapOptions,
) -> Result<BootstrapOutcome> {
    env.validate()?;
    let queries = eligible(world.queries, env.max_relations);
    if queries.is_empty() {
        return Err(Error::config("env.max_relations", "no workload query fits the environment"));
    }
    let mut session = Session::new(world, options.train.clone(), agent)?;
    let mut metrics = Metrics::default();
    let cost_env = EnvConfig { reward: RewardSpec::Cost, ..env.clone() };
    let mut rewards = Vec::new();
    let mut converged_after = None;
    for i in 0..options.phase1_cap {
        let spec = EpisodeSpec {
            env: &cost_env,
            epsilon: options.train.epsilon_for(agent, i, options.phase1_cap),
            phase: PHASE1,
            timeout: options.train.timeout,
            mix: None,
            slip_active: false,
        };
        let record = session.run(agent, queries[i % queries.len()], &spec)?;
        rewards.push(record.reward);
        metrics.records.push(record);
        if detect_convergence(&rewards, options.convergence_window, options.convergence_epsilon) {
            converged_after = Some(i + 1);
            break;
        }
    }
    if converged_after.is_none() && options.phase1_cap > 0 {
        metrics.flags.push("phase1 stopped at its episode cap without converging".into());
    }
    if options.phase2_episodes == 0 {
        return Ok(BootstrapOutcome { metrics, calibration: None, converged_after });
    }

    let start = metrics.records.len().saturating_sub(options.calibration_window);
    let calibration = calibrate_bootstrap(&metrics.records[start..])?;
    let scaled_env = EnvConfig {
        reward: RewardSpec::ScaledLatency { calibration: Some(calibration) },
        ..env.clone()
    };
    let offset = metrics.records.len();
    let epsilon = options.train.epsilon.unwrap_or(agent.config.epsilon_end);
    for i in 0..options.phase2_episodes {
        let spec = EpisodeSpec {
            env: &scaled_env,
            epsilon,
            phase: PHASE2,
            timeout: options.train.timeout,
            mix: None,
            slip_active: false,
        };
        let q = queries[(offset + i) % queries.len()];
        metrics.records.push(session.run(agent, q, &spec)?);
    }
    Ok(BootstrapOutcome {
        metrics,
        calibration: Some(calibration),
        converged_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{build_latency_model, LatencyConfig};
    use crate::trainers::tests::{small_agent, Fixture};
    use crate::trainers::train_vanilla_cost;
    use proptest::prelude::*;

    fn record(cost: f64, latency: f64) -> EpisodeRecord {
        EpisodeRecord {
            episode: 0,
            phase: PHASE1.into(),
            query_id: 0,
            agent_cost: cost,
            expert_cost: cost,
            cost_ratio: 1.0,
            latency_s: latency,
            expert_latency_s: latency,
            latency_ratio: 1.0,
            loss: f64::NAN,
            epsilon: 0.0,
            timeout: false,
            reward: -cost,
            join_actions: 0,
            slip_active: false,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn worked_ranges() {
        let tail: Vec<_> = (0..=4).map(|i| record(10.0 + 10.0 * i as f64, 100.0 + 25.0 * i as f64)).collect();
        let cal = calibrate_bootstrap(&tail).unwrap();
        assert_eq!(cal, BootstrapCalibration { c_min: 10.0, c_max: 50.0, l_min: 100.0, l_max: 200.0 });
        assert_eq!(scale_latency_reward(&cal, 150.0), 30.0);
        assert_eq!(scale_latency_reward(&cal, 100.0), 10.0);
        assert_eq!(scale_latency_reward(&cal, 200.0), 50.0);
        assert_eq!(scale_latency_reward(&cal, 300.0), 90.0);
    }

    #[test]
    fn degenerate_windows() {
        assert!(matches!(calibrate_bootstrap(&[record(1.0, 1.0)]), Err(Error::Calibration(_))));
        let flat = vec![record(1.0, 5.0), record(2.0, 5.0)];
        assert!(matches!(calibrate_bootstrap(&flat), Err(Error::Calibration(_))));
        let flat_cost = vec![record(3.0, 5.0), record(3.0, 6.0)];
        assert!(matches!(calibrate_bootstrap(&flat_cost), Err(Error::Calibration(_))));
    }

    #[test]
    fn convergence_detector() {
        assert!(detect_convergence(&[5.0; 400], 200, 0.01));
        assert!(!detect_convergence(&[5.0; 399], 200, 0.01));
        let improving: Vec<f64> = (0..400).map(|i| if i < 200 { 100.0 } else { 90.0 }).collect();
        assert!(!detect_convergence(&improving, 200, 0.01));
        assert!(detect_convergence(&[-4.0, -4.0, -4.02, -3.98], 2, 0.01));
    }

    #[test]
    fn no_second_phase_reduces_to_vanilla() {
        let fx = Fixture::new(5, 10, 3, 5);
        let env = EnvConfig::join_order_only(5);
        let train = TrainOptions { episodes: 300, ..TrainOptions::default() };
        let options = BootstrapOptions {
            train: train.clone(),
            phase1_cap: 300,
            phase2_episodes: 0,
            convergence_window: 1000,
            ..BootstrapOptions::default()
        };
        let mut a = small_agent(&env, 4);
        let boot = train_bootstrap(fx.world(), &mut a, &env, &options).unwrap();
        let mut b = small_agent(&env, 4);
        let vanilla = train_vanilla_cost(fx.world(), &mut b, &env, &train).unwrap();
        assert_eq!(boot.metrics.records.len(), vanilla.records.len());
        for (x, y) in boot.metrics.records.iter().zip(&vanilla.records) {
            assert_eq!((x.query_id, x.agent_cost, x.loss.to_bits()), (y.query_id, y.agent_cost, y.loss.to_bits()));
        }
        assert_eq!(a, b);
        assert!(boot.calibration.is_none());
        assert_eq!(boot.metrics.flags.len(), 1);
    }

    #[test]
    fn phases_are_labelled() {
        let fx = Fixture::new(6, 10, 3, 5);
        let env = EnvConfig::join_order_only(5);
        let options = BootstrapOptions {
            phase1_cap: 150,
            phase2_episodes: 30,
            convergence_window: 50,
            calibration_window: 50,
            ..BootstrapOptions::default()
        };
        let mut agent = small_agent(&env, 5);
        let out = train_bootstrap(fx.world(), &mut agent, &env, &options).unwrap();
        let p1 = out.metrics.records.iter().filter(|r| r.phase == PHASE1).count();
        let p2 = out.metrics.records.iter().filter(|r| r.phase == PHASE2).count();
        assert!((100..=150).contains(&p1));
        assert_eq!(p2, 30);
        assert!(out.metrics.records.windows(2).all(|w| w[1].episode == w[0].episode + 1));
    }

    #[test]
    fn exact_latency_model_makes_phase_two_affine() {
        let mut fx = Fixture::new(7, 10, 3, 5);
        fx.latency = build_latency_model(&fx.catalog, &LatencyConfig::exact(), 7).unwrap();
        let env = EnvConfig::join_order_only(5);
        let options = BootstrapOptions {
            phase1_cap: 200,
            phase2_episodes: 50,
            convergence_window: 1000,
            calibration_window: 100,
            ..BootstrapOptions::default()
        };
        let mut agent = small_agent(&env, 6);
        let out = train_bootstrap(fx.world(), &mut agent, &env, &options).unwrap();
        for r in out.metrics.records.iter().filter(|r| r.phase == PHASE2) {
            // latency = alpha * cost, so the scaled reward is the cost itself
            assert!((-r.reward - r.agent_cost).abs() <= 1e-9 * r.agent_cost);
        }
    }

    proptest! {
        #[test]
        fn scaling_is_linear(
            c_min in 0.1f64..1e3, dc in 0.1f64..1e3, l_min in 1e-3f64..1e2, dl in 1e-3f64..1e2,
            l1 in 0.0f64..500.0, l2 in 0.0f64..500.0, lambda in -1.0f64..2.0,
        ) {
            let cal = BootstrapCalibration::new(c_min, c_min + dc, l_min, l_min + dl).unwrap();
            let lhs = scale_latency_reward(&cal, lambda * l1 + (1.0 - lambda) * l2);
            let rhs = lambda * scale_latency_reward(&cal, l1) + (1.0 - lambda) * scale_latency_reward(&cal, l2);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs().max(rhs.abs())) * (1.0 + dc / dl));
            prop_assert!((scale_latency_reward(&cal, cal.l_min) - cal.c_min).abs() <= 1e-9 * cal.c_min.max(1.0));
            prop_assert!((scale_latency_reward(&cal, cal.l_max) - cal.c_max).abs() <= 1e-9 * cal.c_max.max(1.0));
        }
    }
}
