//! Bottom-up plan construction as an episodic decision process.
//!
//! Every relation starts as its own subtree; join actions merge two subtrees
//! until one remains. Further pipeline stages (access paths, join operators,
//! aggregate operator) run strictly after the join stage and only when
//! enabled by [`EnvConfig::stages`]. Stages that are not enabled are filled in
//! by the expert when the plan is extracted.
//!
//! Subtrees are kept sorted by their smallest relation id, and join actions
//! are unordered pairs `(i, j)`, `i < j`, over that ordering. The merged
//! subtree puts the input with fewer estimated rows on the left.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{Catalog, Query, RelId};
use crate::costmodel::{
    aggregate_cost, cost_plan, join_operator_cost, simulate_latency, LatencyModel, QueryStats, Selectivities,
};
use crate::expert::{complete_with_stats, PartialDecisions};
use crate::plans::{AccessPath, AggregateOperator, JoinOperator, JoinTree, PhysicalPlan};
use crate::trainers::bootstrap::{scale_latency_reward, BootstrapCalibration};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    JoinOrder,
    AccessPath,
    JoinOperator,
    Aggregate,
}

impl Stage {
    pub const PIPELINE: [Stage; 4] = [Stage::JoinOrder, Stage::AccessPath, Stage::JoinOperator, Stage::Aggregate];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::JoinOrder => "join-order",
            Stage::AccessPath => "access-path",
            Stage::JoinOperator => "join-operator",
            Stage::Aggregate => "aggregate-operator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Cost,
    Latency,
    ScaledLatency { calibration: Option<BootstrapCalibration> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of enabled pipeline stages, 1 (join order only) to 4.
    pub stages: usize,
    /// Largest query the encoding accommodates.
    pub max_relations: usize,
    pub reward: RewardSpec,
}

impl EnvConfig {
    pub fn join_order_only(max_relations: usize) -> Self {
        EnvConfig {
            stages: 1,
            max_relations,
            reward: RewardSpec::Cost,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.stages) {
            return Err(Error::config("stages", "must be between 1 and 4"));
        }
        if !(1..=64).contains(&self.max_relations) {
            return Err(Error::config("max_relations", "must be between 1 and 64"));
        }
        Ok(())
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        stage.index() < self.stages
    }

    /// `N^2 + 2N + 8` for `N = max_relations`.
    pub fn feature_len(&self) -> usize {
        let n = self.max_relations;
        n * n + 2 * n + SCALARS
    }

    /// Identity of the (state, action) encoding; rewards are not part of it.
    pub fn fingerprint(&self) -> String {
        let text = format!(
            "stages={};max_relations={};features={}",
            self.stages,
            self.max_relations,
            self.feature_len()
        );
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionKind {
    /// Merge forest subtrees `left < right` (positions in canonical order).
    JoinPair { left: usize, right: usize },
    AccessPath { relation: RelId, path: AccessPath },
    /// `node` is the post-order index of a join in the finished tree.
    JoinOperator { node: usize, operator: JoinOperator },
    Aggregate { operator: AggregateOperator },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    /// Position in the legal action list of the state it was issued in.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub query_id: u32,
    pub forest: Vec<JoinTree>,
    pub access_paths: BTreeMap<RelId, AccessPath>,
    pub join_operators: Vec<Option<JoinOperator>>,
    pub aggregate: Option<AggregateOperator>,
    pub stage: Option<Stage>,
    pub terminal: bool,
}

pub type FeatureVector = Vec<f64>;

const SCALARS: usize = 8;

/// One episode over one query. Single-owner mutable state.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    config: EnvConfig,
    catalog: &'a Catalog,
    latency: &'a LatencyModel,
    query: &'a Query,
    stats: QueryStats,
    state: EnvState,
    /// Relation masks of `state.forest`, same order.
    masks: Vec<u64>,
    /// Feature column of each query position: its rank by estimated scan rows.
    columns: Vec<usize>,
    log_scale: f64,
}

impl<'a> Env<'a> {
    pub fn reset(
        config: EnvConfig,
        catalog: &'a Catalog,
        latency: &'a LatencyModel,
        query: &'a Query,
    ) -> Result<(Env<'a>, Vec<Action>)> {
        config.validate()?;
        if query.len() > config.max_relations {
            return Err(Error::contract(format!(
                "query {} has {} relations, environment accepts at most {}",
                query.id,
                query.len(),
                config.max_relations
            )));
        }
        let stats = QueryStats::new(catalog, query, Selectivities::Estimated)?;
        let forest: Vec<JoinTree> = query.relation_ids.iter().map(|&r| JoinTree::Leaf(r)).collect();
        let masks = (0..forest.len()).map(|p| 1u64 << p).collect();
        let mut order: Vec<usize> = (0..query.len()).collect();
        order.sort_by(|&a, &b| stats.scan_rows[a].total_cmp(&stats.scan_rows[b]).then(a.cmp(&b)));
        let mut columns = vec![0; query.len()];
        for (rank, &pos) in order.iter().enumerate() {
            columns[pos] = rank;
        }
        let mut env = Env {
            columns,
            log_scale: 1.0 / (1.0 + catalog.max_cardinality() as f64).ln(),
            config,
            catalog,
            latency,
            query,
            stats,
            state: EnvState {
                query_id: query.id,
                forest,
                access_paths: BTreeMap::new(),
                join_operators: Vec::new(),
                aggregate: None,
                stage: Some(Stage::JoinOrder),
                terminal: false,
            },
            masks,
        };
        env.advance();
        let actions = if env.state.terminal { Vec::new() } else { env.legal_actions()? };
        Ok((env, actions))
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn query(&self) -> &'a Query {
        self.query
    }

    pub fn catalog(&self) -> &'a Catalog {
        self.catalog
    }

    pub fn latency_model(&self) -> &'a LatencyModel {
        self.latency
    }

    pub fn stats(&self) -> &QueryStats {
        &self.stats
    }

    fn stage_pending(&self, stage: Stage) -> bool {
        match stage {
            Stage::JoinOrder => self.state.forest.len() > 1,
            Stage::AccessPath => self.state.access_paths.len() < self.query.len(),
            Stage::JoinOperator => self.state.join_operators.iter().any(Option::is_none),
            Stage::Aggregate => self.query.aggregate && self.state.aggregate.is_none(),
        }
    }

    /// Moves the stage cursor past exhausted stages.
    fn advance(&mut self) {
        while let Some(stage) = self.state.stage {
            if self.config.enabled(stage) && self.stage_pending(stage) {
                return;
            }
            let next = Stage::PIPELINE
                .get(stage.index() + 1)
                .copied()
                .filter(|s| self.config.enabled(*s));
            if next == Some(Stage::JoinOperator) {
                let joins = self.state.forest[0].join_count();
                self.state.join_operators = vec![None; joins];
            }
            self.state.stage = next;
        }
        self.state.terminal = true;
    }

    /// Post-order join nodes of the finished tree as (left mask, right mask).
    fn join_nodes(&self) -> Vec<(u64, u64)> {
        fn walk(t: &JoinTree, stats: &QueryStats, out: &mut Vec<(u64, u64)>) -> u64 {
            match t {
                JoinTree::Leaf(r) => 1 << stats.position(*r).expect("query relation"),
                JoinTree::Join(l, r) => {
                    let lm = walk(l, stats, out);
                    let rm = walk(r, stats, out);
                    out.push((lm, rm));
                    lm | rm
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.state.forest[0], &self.stats, &mut out);
        out
    }

    pub fn legal_actions(&self) -> Result<Vec<Action>> {
        let Some(stage) = self.state.stage else {
            return Err(Error::contract("no legal actions in a terminal state"));
        };
        let mut kinds = Vec::new();
        match stage {
            Stage::JoinOrder => {
                let k = self.state.forest.len();
                for left in 0..k {
                    for right in left + 1..k {
                        kinds.push(ActionKind::JoinPair { left, right });
                    }
                }
            }
            Stage::AccessPath => {
                for (pos, &relation) in self.query.relation_ids.iter().enumerate() {
                    if self.state.access_paths.contains_key(&relation) {
                        continue;
                    }
                    for &(path, _) in &self.stats.scan_options[pos] {
                        kinds.push(ActionKind::AccessPath { relation, path });
                    }
                }
            }
            Stage::JoinOperator => {
                for (node, op) in self.state.join_operators.iter().enumerate() {
                    if op.is_none() {
                        for operator in JoinOperator::ALL {
                            kinds.push(ActionKind::JoinOperator { node, operator });
                        }
                    }
                }
            }
            Stage::Aggregate => {
                for operator in AggregateOperator::ALL {
                    kinds.push(ActionKind::Aggregate { operator });
                }
            }
        }
        Ok(kinds
            .into_iter()
            .enumerate()
            .map(|(index, kind)| Action { kind, index })
            .collect())
    }

    fn check_legal(&self, action: &Action) -> Result<()> {
        let legal = self.legal_actions()?;
        if legal.get(action.index) != Some(action) {
            return Err(Error::contract(format!("illegal action {action:?}")));
        }
        Ok(())
    }

    /// Applies a legal action; the state is untouched on error.
    pub fn step(&mut self, action: &Action) -> Result<bool> {
        self.check_legal(action)?;
        match &action.kind {
            ActionKind::JoinPair { left, right } => {
                let (ma, mb) = (self.masks[*left], self.masks[*right]);
                let b = self.state.forest.remove(*right);
                let a = self.state.forest.remove(*left);
                self.masks.remove(*right);
                self.masks.remove(*left);
                let (tree, mask) = if self.stats.canonical_left(ma, mb) {
                    (JoinTree::join(a, b), ma | mb)
                } else {
                    (JoinTree::join(b, a), ma | mb)
                };
                let at = self
                    .masks
                    .iter()
                    .position(|m| m.trailing_zeros() > mask.trailing_zeros())
                    .unwrap_or(self.masks.len());
                self.state.forest.insert(at, tree);
                self.masks.insert(at, mask);
            }
            ActionKind::AccessPath { relation, path } => {
                self.state.access_paths.insert(*relation, *path);
            }
            ActionKind::JoinOperator { node, operator } => {
                self.state.join_operators[*node] = Some(*operator);
            }
            ActionKind::Aggregate { operator } => {
                self.state.aggregate = Some(*operator);
            }
        }
        self.advance();
        Ok(self.state.terminal)
    }

    /// Decisions the agent has made so far, as a pipeline prefix.
    fn decisions(&self) -> PartialDecisions {
        let decided = |s: Stage| self.config.enabled(s);
        PartialDecisions {
            join_tree: Some(self.state.forest[0].clone()),
            access_paths: decided(Stage::AccessPath).then(|| self.state.access_paths.clone()),
            join_operators: decided(Stage::JoinOperator)
                .then(|| self.state.join_operators.iter().map(|o| o.expect("stage complete")).collect()),
            aggregate: if decided(Stage::Aggregate) { self.state.aggregate } else { None },
        }
    }

    /// The complete plan of a terminal state; undecided stages are completed by the expert.
    pub fn extract_plan(&self) -> Result<PhysicalPlan> {
        if !self.state.terminal {
            return Err(Error::contract("plan extraction needs a terminal state"));
        }
        complete_with_stats(&self.stats, &self.decisions())
    }

    pub fn featurize(&self, action: &Action) -> Result<FeatureVector> {
        self.check_legal(action)?;
        Ok(self.features(action))
    }

    /// Feature vectors for every action in `actions`, which must be legal here.
    pub fn featurize_all(&self, actions: &[Action]) -> Vec<FeatureVector> {
        actions.iter().map(|a| self.features(a)).collect()
    }

    /// Layout: forest incidence matrix (N x N, row = subtree, column = relation),
    /// membership of the two operands (N each), then eight scalars
    /// `[a, b, c, d, stage one-hot x4]`. Relation columns are ordered by estimated
    /// rows after selections, so column 0 is always the smallest input.
    ///
    /// The scalars depend on the action type. Log terms are `ln(1 + x)` scaled by
    /// `1 / ln(1 + max catalog cardinality)`.
    /// - join pair: rows of the left and right input of the resulting join, rows of the result, linking selectivity
    /// - access path: base rows, rows after selections, path cost, selectivity the path exploits
    /// - join operator: rows of each child, operator cost, linking selectivity
    /// - aggregate: input rows, 0, operator cost, 1
    fn features(&self, action: &Action) -> FeatureVector {
        let n = self.config.max_relations;
        let mut f = vec![0.0; self.config.feature_len()];
        for (row, &mask) in self.masks.iter().enumerate() {
            for (pos, &col) in self.columns.iter().enumerate() {
                if mask & (1 << pos) != 0 {
                    f[row * n + col] = 1.0;
                }
            }
        }
        let first = n * n;
        let second = first + n;
        let scalars = second + n;
        let log = |x: f64| (1.0 + x).ln() * self.log_scale;
        let set_operand = |f: &mut Vec<f64>, offset: usize, mask: u64| {
            for (pos, &col) in self.columns.iter().enumerate() {
                if mask & (1 << pos) != 0 {
                    f[offset + col] = 1.0;
                }
            }
        };
        let s = &self.stats;
        let values: [f64; 4] = match &action.kind {
            ActionKind::JoinPair { left, right } => {
                let (mut a, mut b) = (self.masks[*left], self.masks[*right]);
                // operands in the orientation the join will have
                if !s.canonical_left(a, b) {
                    std::mem::swap(&mut a, &mut b);
                }
                set_operand(&mut f, first, a);
                set_operand(&mut f, second, b);
                [log(s.rows(a)), log(s.rows(b)), log(s.rows(a | b)), s.link_selectivity(a, b)]
            }
            ActionKind::AccessPath { relation, path } => {
                let pos = s.position(*relation).expect("legal action");
                set_operand(&mut f, first, 1 << pos);
                let cost = s.scan_cost(pos, *path).expect("legal action");
                let used = match path {
                    AccessPath::Sequential => 1.0,
                    AccessPath::Index { attribute } => self
                        .query
                        .selection_predicates
                        .iter()
                        .filter(|p| p.relation == *relation && p.attribute == *attribute)
                        .map(|p| p.selectivity)
                        .product(),
                };
                [log(s.base_rows[pos]), log(s.scan_rows[pos]), log(cost), used]
            }
            ActionKind::JoinOperator { node, operator } => {
                let (l, r) = self.join_nodes()[*node];
                set_operand(&mut f, first, l);
                set_operand(&mut f, second, r);
                let cost = join_operator_cost(*operator, s.rows(l), s.rows(r));
                [log(s.rows(l)), log(s.rows(r)), log(cost), s.link_selectivity(l, r)]
            }
            ActionKind::Aggregate { operator } => {
                let rows = s.rows(s.full_mask());
                [log(rows), 0.0, log(aggregate_cost(*operator, rows)), 1.0]
            }
        };
        f[scalars..scalars + 4].copy_from_slice(&values);
        if let Some(stage) = self.state.stage {
            f[scalars + 4 + stage.index()] = 1.0;
        }
        f
    }

    /// What a recorded expert plan looks like in terms of this environment's decisions.
    pub(crate) fn extract_target(&self, plan: &PhysicalPlan) -> Result<ExpertTarget> {
        let tree = plan.root.join_tree();
        let joins = tree
            .join_nodes_postorder()
            .iter()
            .map(|rels| self.stats.mask_of(rels))
            .collect::<Result<BTreeSet<u64>>>()?;
        Ok(ExpertTarget {
            joins,
            access_paths: plan.root.access_paths().into_iter().collect(),
            join_operators: plan.root.join_operators_postorder(),
            aggregate: plan.aggregate,
        })
    }

    pub(crate) fn consistent_with(&self, action: &Action, target: &ExpertTarget) -> bool {
        match &action.kind {
            ActionKind::JoinPair { left, right } => target.joins.contains(&(self.masks[*left] | self.masks[*right])),
            ActionKind::AccessPath { relation, path } => target.access_paths.get(relation) == Some(path),
            ActionKind::JoinOperator { node, operator } => target.join_operators.get(*node) == Some(operator),
            ActionKind::Aggregate { operator } => target.aggregate == Some(*operator),
        }
    }
}

pub(crate) struct ExpertTarget {
    joins: BTreeSet<u64>,
    access_paths: BTreeMap<RelId, AccessPath>,
    join_operators: Vec<JoinOperator>,
    aggregate: Option<AggregateOperator>,
}

/// Terminal reward of an episode; negative cost or (scaled) latency.
pub fn episode_reward(
    plan: &PhysicalPlan,
    reward: &RewardSpec,
    catalog: &Catalog,
    query: &Query,
    latency: &LatencyModel,
    execution_seed: u64,
) -> Result<f64> {
    match reward {
        RewardSpec::Cost => Ok(-cost_plan(catalog, query, plan)?.value()),
        RewardSpec::Latency => Ok(-simulate_latency(latency, catalog, query, plan, execution_seed)?.seconds),
        RewardSpec::ScaledLatency { calibration } => {
            let cal = calibration
                .as_ref()
                .ok_or_else(|| Error::contract("scaled-latency reward needs a calibration"))?;
            let l = simulate_latency(latency, catalog, query, plan, execution_seed)?.seconds;
            Ok(-scale_latency_reward(cal, l))
        }
    }
}
