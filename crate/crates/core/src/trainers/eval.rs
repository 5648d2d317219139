//! Greedy evaluation of an agent against an expert, per query.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eligible, median, World};
use crate::agent::{select_index, Agent};
use crate::catalog::Query;
use crate::costmodel::{cost_plan, simulate_latency};
use crate::env::{Env, EnvConfig};
use crate::expert::ExpertKind;
use crate::plans::PhysicalPlan;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: u32,
    pub relations: usize,
    pub agent_cost: f64,
    pub expert_cost: f64,
    pub cost_ratio: f64,
    /// Median over the evaluation's execution seeds.
    pub agent_latency_s: f64,
    pub expert_latency_s: f64,
    pub latency_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub expert: ExpertKind,
    pub execution_seeds: Vec<u64>,
    pub rows: Vec<EvalRow>,
    pub median_cost_ratio: f64,
    pub median_latency_ratio: f64,
}

pub const EVAL_HEADER: &str =
    "query_id,relations,agent_cost,expert_cost,cost_ratio,agent_latency_s,expert_latency_s,latency_ratio";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVAL_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.query_id,
                r.relations,
                r.agent_cost,
                r.expert_cost,
                r.cost_ratio,
                r.agent_latency_s,
                r.expert_latency_s,
                r.latency_ratio
            );
        }
        out
    }
}

/// The agent's greedy plan for `query`.
pub fn greedy_plan(world: World<'_>, env: &EnvConfig, agent: &Agent, query: &Query) -> Result<PhysicalPlan> {
    let (mut e, mut legal) = Env::reset(env.clone(), world.catalog, world.latency, query)?;
    // epsilon 0 never draws from the RNG
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while !e.state().terminal {
        let features = e.featurize_all(&legal);
        let i = select_index(&agent.params, &features, 0.0, &mut rng)?;
        e.step(&legal[i])?;
        if !e.state().terminal {
            legal = e.legal_actions()?;
        }
    }
    e.extract_plan()
}

fn median_latency(world: World<'_>, query: &Query, plan: &PhysicalPlan, seeds: &[u64]) -> Result<f64> {
    let samples = seeds
        .iter()
        .map(|&s| simulate_latency(world.latency, world.catalog, query, plan, s).map(|l| l.seconds))
        .collect::<Result<Vec<_>>>()?;
    Ok(median(&samples).expect("seeds are nonempty"))
}

/// Compares the given plans, one per query id, against the expert's.
pub fn evaluate_plans(
    world: World<'_>,
    plans: &[(u32, PhysicalPlan)],
    expert: ExpertKind,
    execution_seeds: &[u64],
) -> Result<EvalReport> {
    if execution_seeds.is_empty() {
        return Err(Error::config("eval.execution_seeds", "needs at least one seed"));
    }
    let mut rows = Vec::new();
    for (id, plan) in plans {
        let q = world
            .queries
            .iter()
            .find(|q| q.id == *id)
            .ok_or_else(|| Error::contract(format!("unknown query {id}")))?;
        let reference = expert.optimize(world.catalog, q)?;
        let agent_cost = cost_plan(world.catalog, q, plan)?.value();
        let expert_cost = cost_plan(world.catalog, q, &reference)?.value();
        let agent_latency_s = median_latency(world, q, plan, execution_seeds)?;
        let expert_latency_s = median_latency(world, q, &reference, execution_seeds)?;
        rows.push(EvalRow {
            query_id: *id,
            relations: q.len(),
            agent_cost,
            expert_cost,
            cost_ratio: agent_cost / expert_cost,
            agent_latency_s,
            expert_latency_s,
            latency_ratio: agent_latency_s / expert_latency_s,
        });
    }
    let pick = |f: fn(&EvalRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    Ok(EvalReport {
        expert,
        execution_seeds: execution_seeds.to_vec(),
        median_cost_ratio: pick(|r| r.cost_ratio),
        median_latency_ratio: pick(|r| r.latency_ratio),
        rows,
    })
}

/// Greedy (epsilon 0) agent plans for every query the environment accepts.
pub fn evaluate_agent(
    world: World<'_>,
    env: &EnvConfig,
    agent: &Agent,
    expert: ExpertKind,
    execution_seeds: &[u64],
) -> Result<EvalReport> {
    let plans = eligible(world.queries, env.max_relations)
        .into_iter()
        .map(|q| Ok((q.id, greedy_plan(world, env, agent, q)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_plans(world, &plans, expert, execution_seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::tests::{small_agent, Fixture};

    #[test]
    fn expert_self_comparison_is_exact() {
        let fx = Fixture::new(17, 15, 2, 6);
        let world = fx.world();
        for expert in [ExpertKind::Dp, ExpertKind::Greedy] {
            let plans: Vec<_> = fx
                .workload
                .queries
                .iter()
                .map(|q| (q.id, expert.optimize(&fx.catalog, q).unwrap()))
                .collect();
            let report = evaluate_plans(world, &plans, expert, &[1, 2, 3]).unwrap();
            assert!(report.rows.iter().all(|r| r.cost_ratio == 1.0 && r.latency_ratio == 1.0));
        }
    }

    #[test]
    fn untrained_agent_is_worse_than_dp() {
        let fx = Fixture::new(18, 30, 6, 6);
        let env = EnvConfig::join_order_only(6);
        let agent = small_agent(&env, 12);
        let report = evaluate_agent(fx.world(), &env, &agent, ExpertKind::Dp, &[0, 1, 2]).unwrap();
        assert_eq!(report.rows.len(), 30);
        assert!(report.median_cost_ratio > 1.0);
        let again = evaluate_agent(fx.world(), &env, &agent, ExpertKind::Dp, &[0, 1, 2]).unwrap();
        assert_eq!(report.to_csv(), again.to_csv());
        assert!(evaluate_agent(fx.world(), &env, &agent, ExpertKind::Dp, &[]).is_err());
    }
}
