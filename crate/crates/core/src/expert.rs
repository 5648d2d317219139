//! Classical optimizers: the demonstration teacher, the evaluation baseline and
//! the completion mechanism for stages an agent does not control yet.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Query, RelId};
use crate::costmodel::{
    best_aggregate, best_join_operator, simulate_latency, LatencyModel, QueryStats, Selectivities,
};
use crate::env::{Action, ActionKind, Env, EnvConfig, EnvState};
use crate::persist::{self, FORMAT_VERSION};
use crate::plans::{AccessPath, AggregateOperator, JoinOperator, JoinTree, PhysicalPlan, PlanNode};
use crate::{Error, Result};

/// Largest query the subset DP accepts.
pub const DP_LIMIT: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    #[default]
    Dp,
    Greedy,
}

impl ExpertKind {
    pub fn optimize(self, catalog: &Catalog, query: &Query) -> Result<PhysicalPlan> {
        match self {
            ExpertKind::Dp => optimize_dp(catalog, query),
            ExpertKind::Greedy => optimize_greedy(catalog, query),
        }
    }

    pub(crate) fn plan_with_stats(self, stats: &QueryStats) -> Result<PhysicalPlan> {
        match self {
            ExpertKind::Dp => dp_plan(stats),
            ExpertKind::Greedy => Ok(greedy_plan(stats)),
        }
    }
}

/// Cost-optimal plan over bushy orders, access paths, join and aggregate operators.
pub fn optimize_dp(catalog: &Catalog, query: &Query) -> Result<PhysicalPlan> {
    if query.len() > DP_LIMIT {
        return Err(Error::Refused(format!(
            "{} relations exceed the DP limit of {DP_LIMIT}",
            query.len()
        )));
    }
    let stats = QueryStats::new(catalog, query, Selectivities::Estimated)?;
    dp_plan(&stats)
}

#[derive(Clone, Copy)]
enum Choice {
    Scan(AccessPath),
    Join { left: u64, op: JoinOperator },
}

/// Keeps the cheapest plan per relation subset. Every split of a subset is
/// tried, cross products included, but only in the canonical orientation:
/// putting the smaller input on the left never raises either operator's cost.
pub(crate) fn dp_plan(stats: &QueryStats) -> Result<PhysicalPlan> {
    let n = stats.len();
    if n > DP_LIMIT {
        return Err(Error::Refused(format!("{n} relations exceed the DP limit of {DP_LIMIT}")));
    }
    let full = stats.full_mask();
    let size = full as usize + 1;
    let rows: Vec<f64> = (0..size as u64).map(|m| stats.rows(m)).collect();
    let mut cost = vec![f64::INFINITY; size];
    let mut choice = vec![Choice::Scan(AccessPath::Sequential); size];
    for p in 0..n {
        let (access, c) = stats.best_scan(p);
        cost[1 << p] = c;
        choice[1 << p] = Choice::Scan(access);
    }
    for mask in 1..=full {
        if mask.count_ones() < 2 {
            continue;
        }
        let m = mask as usize;
        let mut sub = (mask - 1) & mask;
        while sub != 0 {
            let other = mask ^ sub;
            let (rl, rr) = (rows[sub as usize], rows[other as usize]);
            let canonical = rl < rr || (rl == rr && sub.trailing_zeros() < other.trailing_zeros());
            if canonical {
                let (op, oc) = best_join_operator(rl, rr);
                let c = (cost[sub as usize] + cost[other as usize]) + oc;
                if c < cost[m] {
                    cost[m] = c;
                    choice[m] = Choice::Join { left: sub, op };
                }
            }
            sub = (sub - 1) & mask;
        }
    }
    fn build(mask: u64, choice: &[Choice], stats: &QueryStats) -> PlanNode {
        match choice[mask as usize] {
            Choice::Scan(access) => PlanNode::Scan {
                relation: stats.relation_ids[mask.trailing_zeros() as usize],
                access,
            },
            Choice::Join { left, op } => PlanNode::Join {
                operator: op,
                left: Box::new(build(left, choice, stats)),
                right: Box::new(build(mask ^ left, choice, stats)),
            },
        }
    }
    Ok(PhysicalPlan {
        root: build(full, &choice, stats),
        aggregate: stats.aggregate.then(|| best_aggregate(rows[full as usize]).0),
    })
}

/// Bottom-up greedy: repeatedly joins the pair whose joined subtree is cheapest.
pub fn optimize_greedy(catalog: &Catalog, query: &Query) -> Result<PhysicalPlan> {
    let stats = QueryStats::new(catalog, query, Selectivities::Estimated)?;
    Ok(greedy_plan(&stats))
}

pub(crate) fn greedy_plan(stats: &QueryStats) -> PhysicalPlan {
    struct Sub {
        mask: u64,
        cost: f64,
        node: PlanNode,
    }
    let mut forest: Vec<Sub> = (0..stats.len())
        .map(|p| {
            let (access, cost) = stats.best_scan(p);
            Sub {
                mask: 1 << p,
                cost,
                node: PlanNode::Scan {
                    relation: stats.relation_ids[p],
                    access,
                },
            }
        })
        .collect();
    while forest.len() > 1 {
        let mut best: Option<(usize, usize, f64, JoinOperator)> = None;
        for i in 0..forest.len() {
            for j in i + 1..forest.len() {
                let (a, b) = (&forest[i], &forest[j]);
                let (l, r) = if stats.canonical_left(a.mask, b.mask) { (a, b) } else { (b, a) };
                let (op, oc) = best_join_operator(stats.rows(l.mask), stats.rows(r.mask));
                let c = (l.cost + r.cost) + oc;
                if best.is_none_or(|(_, _, bc, _)| c < bc) {
                    best = Some((i, j, c, op));
                }
            }
        }
        let (i, j, cost, op) = best.expect("forest has a pair");
        let b = forest.remove(j);
        let a = forest.remove(i);
        let (l, r) = if stats.canonical_left(a.mask, b.mask) { (a, b) } else { (b, a) };
        let joined = Sub {
            mask: l.mask | r.mask,
            cost,
            node: PlanNode::Join {
                operator: op,
                left: Box::new(l.node),
                right: Box::new(r.node),
            },
        };
        let at = forest
            .iter()
            .position(|s| s.mask.trailing_zeros() > joined.mask.trailing_zeros())
            .unwrap_or(forest.len());
        forest.insert(at, joined);
    }
    let root = forest.pop().expect("non-empty query").node;
    PhysicalPlan {
        root,
        aggregate: stats.aggregate.then(|| best_aggregate(stats.rows(stats.full_mask())).0),
    }
}

/// Decisions already fixed for a query, as a prefix of the pipeline
/// (join order, access paths, join operators, aggregate operator).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialDecisions {
    pub join_tree: Option<JoinTree>,
    pub access_paths: Option<BTreeMap<RelId, AccessPath>>,
    /// One operator per join node, post-order.
    pub join_operators: Option<Vec<JoinOperator>>,
    pub aggregate: Option<AggregateOperator>,
}

impl PartialDecisions {
    /// Every decision of `plan`.
    pub fn from_plan(plan: &PhysicalPlan) -> Self {
        PartialDecisions {
            join_tree: Some(plan.root.join_tree()),
            access_paths: Some(plan.root.access_paths().into_iter().collect()),
            join_operators: Some(plan.root.join_operators_postorder()),
            aggregate: plan.aggregate,
        }
    }

    fn check_prefix(&self) -> Result<()> {
        let decided = [
            self.join_tree.is_some(),
            self.access_paths.is_some(),
            self.join_operators.is_some(),
            self.aggregate.is_some(),
        ];
        if decided.windows(2).any(|w| !w[0] && w[1]) {
            return Err(Error::contract("decided stages do not form a pipeline prefix"));
        }
        Ok(())
    }
}

/// Fills every undecided stage with the cheapest choice given the fixed ones.
pub fn complete_partial(catalog: &Catalog, query: &Query, partial: &PartialDecisions) -> Result<PhysicalPlan> {
    let stats = QueryStats::new(catalog, query, Selectivities::Estimated)?;
    complete_with_stats(&stats, partial)
}

pub(crate) fn complete_with_stats(stats: &QueryStats, partial: &PartialDecisions) -> Result<PhysicalPlan> {
    partial.check_prefix()?;
    let Some(tree) = &partial.join_tree else {
        return dp_plan(stats);
    };
    let mut leaves = tree.leaves();
    leaves.sort_unstable();
    if leaves != stats.relation_ids {
        return Err(Error::contract("fixed join tree does not cover the query's relations"));
    }
    if let Some(paths) = &partial.access_paths {
        if !paths.keys().copied().eq(stats.relation_ids.iter().copied()) {
            return Err(Error::contract("access paths must be fixed for exactly the query's relations"));
        }
        for (rel, access) in paths {
            stats.scan_cost(stats.position(*rel).expect("checked"), *access)?;
        }
    }
    if let Some(ops) = &partial.join_operators {
        if ops.len() != tree.join_count() {
            return Err(Error::contract(format!(
                "{} join operators fixed for a tree with {} joins",
                ops.len(),
                tree.join_count()
            )));
        }
    }
    if partial.aggregate.is_some() && !stats.aggregate {
        return Err(Error::contract("aggregate operator fixed for a query without aggregation"));
    }

    fn build(t: &JoinTree, stats: &QueryStats, partial: &PartialDecisions, next_op: &mut usize) -> (PlanNode, u64) {
        match t {
            JoinTree::Leaf(rel) => {
                let pos = stats.position(*rel).expect("checked");
                let access = partial
                    .access_paths
                    .as_ref()
                    .map(|p| p[rel])
                    .unwrap_or_else(|| stats.best_scan(pos).0);
                (PlanNode::Scan { relation: *rel, access }, 1 << pos)
            }
            JoinTree::Join(l, r) => {
                let (ln, lm) = build(l, stats, partial, next_op);
                let (rn, rm) = build(r, stats, partial, next_op);
                let operator = match &partial.join_operators {
                    Some(ops) => ops[*next_op],
                    None => best_join_operator(stats.rows(lm), stats.rows(rm)).0,
                };
                *next_op += 1;
                (
                    PlanNode::Join {
                        operator,
                        left: Box::new(ln),
                        right: Box::new(rn),
                    },
                    lm | rm,
                )
            }
        }
    }
    let (root, mask) = build(tree, stats, partial, &mut 0);
    let aggregate = stats
        .aggregate
        .then(|| partial.aggregate.unwrap_or_else(|| best_aggregate(stats.rows(mask)).0));
    Ok(PhysicalPlan { root, aggregate })
}

/// One step of a demonstration: the state an action was taken in, and the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub action: Action,
    pub state: EnvState,
}

/// An expert's plan for one query, decomposed into environment actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHistory {
    pub query_id: u32,
    pub steps: Vec<HistoryStep>,
    pub terminal_plan: PhysicalPlan,
    pub latency_s: Option<f64>,
}

impl EpisodeHistory {
    /// Runs the terminal plan on the simulator and records its latency.
    pub fn execute(
        &mut self,
        model: &LatencyModel,
        catalog: &Catalog,
        query: &Query,
        execution_seed: u64,
    ) -> Result<f64> {
        let s = simulate_latency(model, catalog, query, &self.terminal_plan, execution_seed)?;
        self.latency_s = Some(s.seconds);
        Ok(s.seconds)
    }
}

/// Decomposes the expert's plan into the environment's action encoding.
///
/// Joins are emitted bottom-up; when several expert joins are available, the
/// one with the smallest action index goes first. Later stages follow the
/// environment's canonical action order.
pub fn record_episode(
    config: &EnvConfig,
    catalog: &Catalog,
    latency: &LatencyModel,
    query: &Query,
    expert: ExpertKind,
) -> Result<EpisodeHistory> {
    let (mut env, _) = Env::reset(config.clone(), catalog, latency, query)?;
    let plan = expert.plan_with_stats(env.stats())?;
    let expected = env.extract_target(&plan)?;
    let mut steps = Vec::new();
    while !env.state().terminal {
        let legal = env.legal_actions()?;
        let action = legal
            .into_iter()
            .find(|a| env.consistent_with(a, &expected))
            .ok_or_else(|| Error::Encoding(format!("no legal action reproduces the expert plan {plan}")))?;
        steps.push(HistoryStep {
            action: action.clone(),
            state: env.state().clone(),
        });
        env.step(&action)?;
    }
    let replayed = env.extract_plan()?;
    if replayed != plan {
        return Err(Error::Encoding(format!("replay produced {replayed}, expert chose {plan}")));
    }
    Ok(EpisodeHistory {
        query_id: query.id,
        steps,
        terminal_plan: plan,
        latency_s: None,
    })
}

/// Replays a history from reset and returns the terminal plan.
pub fn replay_history(
    config: &EnvConfig,
    catalog: &Catalog,
    latency: &LatencyModel,
    query: &Query,
    history: &EpisodeHistory,
) -> Result<PhysicalPlan> {
    let (mut env, _) = Env::reset(config.clone(), catalog, latency, query)?;
    for step in &history.steps {
        env.step(&step.action)?;
    }
    env.extract_plan()
}

/// Appends one history as a single JSON line.
pub fn append_history(path: &Path, history: &EpisodeHistory) -> Result<()> {
    let mut value = serde_json::to_value(history).map_err(|e| Error::contract(e.to_string()))?;
    value["format_version"] = FORMAT_VERSION.into();
    let line = value.to_string();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn load_histories(path: &Path) -> Result<Vec<EpisodeHistory>> {
    let text = persist::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::VersionMismatch {
                    found: v,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(malformed("missing format_version".into())),
        }
        out.push(serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(out)
}

impl ActionKind {
    pub(crate) fn is_join(&self) -> bool {
        matches!(self, ActionKind::JoinPair { .. })
    }
}
