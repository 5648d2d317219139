//! Optimizer cost model and the hidden latency simulator.
//!
//! The cost model multiplies base cardinalities and predicate selectivities
//! under the independence assumption and prices operators with fixed linear
//! formulas. The [`LatencyModel`] reuses the same recursion with perturbed
//! ("true") selectivities, then maps true cost to seconds through
//! `alpha * cost^gamma * exp(noise)`. The perturbation is what makes cost and
//! latency disagree on plan rankings.
//!
//! Output cardinalities are computed canonically from the relation set of a
//! subtree, never from the tree shape, so every enumerator sees bit-identical
//! row counts for the same set of relations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Query, RelId, SelectionPredicate};
use crate::persist;
use crate::plans::{
    available_access_paths, validate_plan, AccessPath, AggregateOperator, JoinOperator, PhysicalPlan, PlanNode,
};
use crate::{Error, Result};

pub const SEQ_SCAN_PER_ROW: f64 = 1.0;
pub const INDEX_LOOKUP: f64 = 1.0;
pub const INDEX_RANDOM_PER_ROW: f64 = 4.0;
pub const NESTED_LOOP_PER_PAIR: f64 = 0.01;
pub const HASH_BUILD_PER_ROW: f64 = 1.5;
pub const HASH_PROBE_PER_ROW: f64 = 1.0;
pub const HASH_AGG_PER_ROW: f64 = 1.0;
pub const SORT_AGG_PER_ROW: f64 = 0.5;

/// A unitless, finite, non-negative plan cost.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostEstimate(f64);

impl CostEstimate {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(CostEstimate(value))
        } else {
            Err(Error::contract(format!("cost {value} is not finite and non-negative")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn seq_scan_cost(base_rows: f64) -> f64 {
    SEQ_SCAN_PER_ROW * base_rows
}

pub fn index_scan_cost(base_rows: f64, output_rows: f64) -> f64 {
    INDEX_LOOKUP * base_rows.log2() + INDEX_RANDOM_PER_ROW * output_rows
}

/// Cost of the join operator itself, excluding its inputs.
pub fn join_operator_cost(op: JoinOperator, left_rows: f64, right_rows: f64) -> f64 {
    match op {
        // the product is formed first so swapping inputs is bit-exact
        JoinOperator::NestedLoop => NESTED_LOOP_PER_PAIR * (left_rows * right_rows),
        JoinOperator::Hash => HASH_BUILD_PER_ROW * left_rows + HASH_PROBE_PER_ROW * right_rows,
    }
}

pub fn aggregate_cost(op: AggregateOperator, input_rows: f64) -> f64 {
    match op {
        AggregateOperator::Hash => HASH_AGG_PER_ROW * input_rows,
        AggregateOperator::Sort => SORT_AGG_PER_ROW * input_rows * (input_rows + 2.0).log2(),
    }
}

/// Cheapest operator for a join; hash wins ties.
pub fn best_join_operator(left_rows: f64, right_rows: f64) -> (JoinOperator, f64) {
    let hash = join_operator_cost(JoinOperator::Hash, left_rows, right_rows);
    let nl = join_operator_cost(JoinOperator::NestedLoop, left_rows, right_rows);
    if nl < hash {
        (JoinOperator::NestedLoop, nl)
    } else {
        (JoinOperator::Hash, hash)
    }
}

/// Cheapest aggregate operator; hash wins ties.
pub fn best_aggregate(input_rows: f64) -> (AggregateOperator, f64) {
    let hash = aggregate_cost(AggregateOperator::Hash, input_rows);
    let sort = aggregate_cost(AggregateOperator::Sort, input_rows);
    if sort < hash {
        (AggregateOperator::Sort, sort)
    } else {
        (AggregateOperator::Hash, hash)
    }
}

/// Where selectivities come from: the optimizer's estimates or the hidden truth.
#[derive(Debug, Clone, Copy)]
pub enum Selectivities<'a> {
    Estimated,
    True(&'a LatencyModel),
}

impl Selectivities<'_> {
    fn join(&self, catalog: &Catalog, edge: usize) -> f64 {
        match self {
            Selectivities::Estimated => catalog.join_edges[edge].selectivity,
            Selectivities::True(m) => m.join_true_selectivity[edge],
        }
    }

    fn selection(&self, pred: &SelectionPredicate) -> f64 {
        match self {
            Selectivities::Estimated => pred.selectivity,
            Selectivities::True(m) => m.true_selection_selectivity(pred),
        }
    }
}

/// Per-query statistics in query-local positions (index into `query.relation_ids`).
///
/// Relation sets are `u64` bitmasks over positions.
#[derive(Debug, Clone)]
pub struct QueryStats {
    pub relation_ids: Vec<RelId>,
    pub base_rows: Vec<f64>,
    /// Base rows after every selection on the relation.
    pub scan_rows: Vec<f64>,
    /// `(position, position, selectivity)` per join predicate, ascending edge id.
    pub edges: Vec<(usize, usize, f64)>,
    /// Available access paths and their costs per position; sequential first.
    pub scan_options: Vec<Vec<(AccessPath, f64)>>,
    pub aggregate: bool,
}

impl QueryStats {
    pub fn new(catalog: &Catalog, query: &Query, sel: Selectivities<'_>) -> Result<Self> {
        query.check(catalog)?;
        if query.len() > 64 {
            return Err(Error::contract("queries are limited to 64 relations"));
        }
        let mut base_rows = Vec::with_capacity(query.len());
        let mut scan_rows = Vec::with_capacity(query.len());
        let mut scan_options = Vec::with_capacity(query.len());
        for &rel in &query.relation_ids {
            let base = catalog.relations[rel.index()].cardinality as f64;
            let mut rows = base;
            for p in query.selection_predicates.iter().filter(|p| p.relation == rel) {
                rows *= sel.selection(p);
            }
            let options = available_access_paths(catalog, query, rel)
                .into_iter()
                .map(|a| {
                    let c = match a {
                        AccessPath::Sequential => seq_scan_cost(base),
                        AccessPath::Index { .. } => index_scan_cost(base, rows),
                    };
                    (a, c)
                })
                .collect();
            base_rows.push(base);
            scan_rows.push(rows);
            scan_options.push(options);
        }
        let edges = query
            .join_predicates
            .iter()
            .map(|&e| {
                let edge = &catalog.join_edges[e];
                let a = query.position(edge.left).expect("checked");
                let b = query.position(edge.right).expect("checked");
                (a, b, sel.join(catalog, e))
            })
            .collect();
        Ok(QueryStats {
            relation_ids: query.relation_ids.clone(),
            base_rows,
            scan_rows,
            edges,
            scan_options,
            aggregate: query.aggregate,
        })
    }

    pub fn len(&self) -> usize {
        self.relation_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relation_ids.is_empty()
    }

    pub fn full_mask(&self) -> u64 {
        if self.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.len()) - 1
        }
    }

    pub fn position(&self, rel: RelId) -> Option<usize> {
        self.relation_ids.binary_search(&rel).ok()
    }

    pub fn mask_of(&self, rels: &[RelId]) -> Result<u64> {
        rels.iter().try_fold(0u64, |m, r| {
            self.position(*r)
                .map(|p| m | (1 << p))
                .ok_or_else(|| Error::contract(format!("{r} is not part of the query")))
        })
    }

    /// Estimated output rows of any subtree over `mask`.
    pub fn rows(&self, mask: u64) -> f64 {
        let mut rows = 1.0;
        for (p, r) in self.scan_rows.iter().enumerate() {
            if mask & (1 << p) != 0 {
                rows *= r;
            }
        }
        for &(a, b, s) in &self.edges {
            if mask & (1 << a) != 0 && mask & (1 << b) != 0 {
                rows *= s;
            }
        }
        rows
    }

    /// Product of selectivities of predicates linking `left` and `right` (1.0 if none).
    pub fn link_selectivity(&self, left: u64, right: u64) -> f64 {
        let mut s = 1.0;
        for &(a, b, sel) in &self.edges {
            let (ma, mb) = (1u64 << a, 1u64 << b);
            if (left & ma != 0 && right & mb != 0) || (left & mb != 0 && right & ma != 0) {
                s *= sel;
            }
        }
        s
    }

    pub fn is_linked(&self, left: u64, right: u64) -> bool {
        self.edges.iter().any(|&(a, b, _)| {
            let (ma, mb) = (1u64 << a, 1u64 << b);
            (left & ma != 0 && right & mb != 0) || (left & mb != 0 && right & ma != 0)
        })
    }

    pub fn scan_cost(&self, pos: usize, access: AccessPath) -> Result<f64> {
        self.scan_options[pos]
            .iter()
            .find(|(a, _)| *a == access)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::contract(format!("access path {access:?} unavailable for position {pos}")))
    }

    /// Cheapest access path; earlier options win ties.
    pub fn best_scan(&self, pos: usize) -> (AccessPath, f64) {
        let mut best = self.scan_options[pos][0];
        for &opt in &self.scan_options[pos][1..] {
            if opt.1 < best.1 {
                best = opt;
            }
        }
        best
    }

    /// Whether `(a, b)` is the canonical (left, right) orientation for a join:
    /// fewer estimated rows on the left, ties broken by smaller minimum relation.
    pub fn canonical_left(&self, a: u64, b: u64) -> bool {
        let (ra, rb) = (self.rows(a), self.rows(b));
        if ra != rb {
            ra < rb
        } else {
            a.trailing_zeros() < b.trailing_zeros()
        }
    }

    /// Cost of a plan subtree and its relation mask.
    pub fn cost_node(&self, node: &PlanNode) -> Result<(f64, u64)> {
        match node {
            PlanNode::Scan { relation, access } => {
                let pos = self
                    .position(*relation)
                    .ok_or_else(|| Error::contract(format!("{relation} is not part of the query")))?;
                Ok((self.scan_cost(pos, *access)?, 1 << pos))
            }
            PlanNode::Join { operator, left, right } => {
                let (cl, ml) = self.cost_node(left)?;
                let (cr, mr) = self.cost_node(right)?;
                let op = join_operator_cost(*operator, self.rows(ml), self.rows(mr));
                Ok(((cl + cr) + op, ml | mr))
            }
        }
    }

    pub fn cost_plan(&self, plan: &PhysicalPlan) -> Result<f64> {
        let (c, mask) = self.cost_node(&plan.root)?;
        Ok(match plan.aggregate {
            Some(op) => c + aggregate_cost(op, self.rows(mask)),
            None => c,
        })
    }
}

/// A predicate the estimator can apply to a relation set.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    /// Id into [`Catalog::join_edges`].
    Join(usize),
    Selection(SelectionPredicate),
}

/// Product of base cardinalities times the product of predicate selectivities.
pub fn estimate_cardinality(catalog: &Catalog, relation_set: &[RelId], predicates: &[Predicate]) -> Result<f64> {
    if relation_set.is_empty() {
        return Err(Error::contract("empty relation set"));
    }
    let mut rows = 1.0;
    for r in relation_set {
        let rel = catalog
            .relation(*r)
            .ok_or_else(|| Error::contract(format!("unknown relation {r}")))?;
        rows *= rel.cardinality as f64;
    }
    let inside = |r: RelId| relation_set.contains(&r);
    for p in predicates {
        match p {
            Predicate::Join(e) => {
                let edge = catalog
                    .join_edges
                    .get(*e)
                    .ok_or_else(|| Error::contract(format!("unknown join edge {e}")))?;
                if !inside(edge.left) || !inside(edge.right) {
                    return Err(Error::contract(format!("join edge {e} references a relation outside the set")));
                }
                rows *= edge.selectivity;
            }
            Predicate::Selection(s) => {
                if !inside(s.relation) {
                    return Err(Error::contract(format!("selection on {} is outside the set", s.relation)));
                }
                rows *= s.selectivity;
            }
        }
    }
    Ok(rows)
}

/// Estimated cost of a valid plan under the optimizer's statistics.
pub fn cost_plan(catalog: &Catalog, query: &Query, plan: &PhysicalPlan) -> Result<CostEstimate> {
    validate_plan(plan, query, catalog).into_result()?;
    let stats = QueryStats::new(catalog, query, Selectivities::Estimated)?;
    CostEstimate::new(stats.cost_plan(plan)?)
}

/// The same recursion as [`cost_plan`] with every selectivity replaced by its true value.
pub fn true_cost(model: &LatencyModel, catalog: &Catalog, query: &Query, plan: &PhysicalPlan) -> Result<f64> {
    validate_plan(plan, query, catalog).into_result()?;
    let stats = QueryStats::new(catalog, query, Selectivities::True(model))?;
    stats.cost_plan(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// Seconds per unit of true cost.
    pub alpha: f64,
    /// Superlinearity exponent applied to true cost.
    pub gamma: f64,
    /// Standard deviation of the log-normal execution noise.
    pub noise_sigma: f64,
    /// Standard deviation of the log-error between estimated and true selectivities.
    pub error_sigma: f64,
    pub heavy_error_probability: f64,
    pub heavy_error_sigma: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            alpha: 0.001,
            gamma: 1.1,
            noise_sigma: 0.05,
            error_sigma: 0.5,
            heavy_error_probability: 0.1,
            heavy_error_sigma: 2.0,
        }
    }
}

impl LatencyConfig {
    /// No estimation error, no noise, linear in cost.
    pub fn exact() -> Self {
        LatencyConfig {
            alpha: 0.001,
            gamma: 1.0,
            noise_sigma: 0.0,
            error_sigma: 0.0,
            heavy_error_probability: 0.0,
            heavy_error_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive and finite"));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be >= 1"));
        }
        for (field, v) in [
            ("noise_sigma", self.noise_sigma),
            ("error_sigma", self.error_sigma),
            ("heavy_error_sigma", self.heavy_error_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.heavy_error_probability) {
            return Err(Error::config("heavy_error_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Hidden ground truth for one catalog. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub config: LatencyConfig,
    pub build_seed: u64,
    /// True selectivity per catalog join edge.
    pub join_true_selectivity: Vec<f64>,
    /// Log-error per `(relation, attribute)`, applied to any selection on that attribute.
    pub selection_log_error: Vec<Vec<f64>>,
}

fn draw_log_error(config: &LatencyConfig, rng: &mut ChaCha8Rng) -> f64 {
    let heavy = rng.random::<f64>() < config.heavy_error_probability;
    let z: f64 = rng.sample(StandardNormal);
    let sigma = if heavy {
        config.heavy_error_sigma
    } else {
        config.error_sigma
    };
    sigma * z
}

fn perturb(estimate: f64, log_error: f64) -> f64 {
    (estimate * log_error.exp()).min(1.0)
}

pub fn build_latency_model(catalog: &Catalog, config: &LatencyConfig, seed: u64) -> Result<LatencyModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let join_true_selectivity = catalog
        .join_edges
        .iter()
        .map(|e| perturb(e.selectivity, draw_log_error(config, &mut rng)))
        .collect();
    let selection_log_error = catalog
        .relations
        .iter()
        .map(|r| r.attributes.iter().map(|_| draw_log_error(config, &mut rng)).collect())
        .collect();
    Ok(LatencyModel {
        config: config.clone(),
        build_seed: seed,
        join_true_selectivity,
        selection_log_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub seconds: f64,
    pub true_cost: f64,
    pub query_id: u32,
    pub execution_seed: u64,
}

impl LatencyModel {
    pub fn true_selection_selectivity(&self, pred: &SelectionPredicate) -> f64 {
        let err = self
            .selection_log_error
            .get(pred.relation.index())
            .and_then(|v| v.get(pred.attribute as usize))
            .copied()
            .unwrap_or(0.0);
        perturb(pred.selectivity, err)
    }

    /// Ratio between true and estimated selectivity of a join edge.
    pub fn join_error_ratio(&self, catalog: &Catalog, edge: usize) -> f64 {
        self.join_true_selectivity[edge] / catalog.join_edges[edge].selectivity
    }

    /// Maps a true cost to seconds for the given noise draw.
    pub fn seconds_for(&self, true_cost: f64, noise: f64) -> f64 {
        self.config.alpha * true_cost.powf(self.config.gamma) * noise.exp()
    }

    fn noise(&self, plan: &PhysicalPlan, execution_seed: u64) -> f64 {
        if self.config.noise_sigma == 0.0 {
            return 0.0;
        }
        let seed = execution_seed ^ self.build_seed.rotate_left(32) ^ plan_fingerprint(plan);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = rng.sample(StandardNormal);
        self.config.noise_sigma * z
    }
}

/// Runs a valid plan on the simulator.
pub fn simulate_latency(
    model: &LatencyModel,
    catalog: &Catalog,
    query: &Query,
    plan: &PhysicalPlan,
    execution_seed: u64,
) -> Result<LatencySample> {
    let true_cost = true_cost(model, catalog, query, plan)?;
    Ok(LatencySample {
        seconds: model.seconds_for(true_cost, model.noise(plan, execution_seed)),
        true_cost,
        query_id: query.id,
        execution_seed,
    })
}

/// Stable FNV-1a hash of a plan's structure.
pub fn plan_fingerprint(plan: &PhysicalPlan) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    fn mix(h: &mut u64, v: u64) {
        for b in v.to_le_bytes() {
            *h ^= b as u64;
            *h = h.wrapping_mul(PRIME);
        }
    }
    fn walk(n: &PlanNode, h: &mut u64) {
        match n {
            PlanNode::Scan { relation, access } => {
                mix(h, 1);
                mix(h, relation.0 as u64);
                match access {
                    AccessPath::Sequential => mix(h, 0),
                    AccessPath::Index { attribute } => mix(h, 1 + *attribute as u64),
                }
            }
            PlanNode::Join { operator, left, right } => {
                mix(h, 2 + *operator as u64);
                walk(left, h);
                walk(right, h);
                mix(h, 9);
            }
        }
    }
    let mut h = 0xcbf2_9ce4_8422_2325;
    walk(&plan.root, &mut h);
    mix(&mut h, plan.aggregate.map_or(0, |a| 1 + a as u64));
    h
}

pub const LATENCY_MODEL_KIND: &str = "latency_model";

pub fn save_latency_model(path: &Path, model: &LatencyModel) -> Result<()> {
    persist::save_versioned(path, LATENCY_MODEL_KIND, model)
}

pub fn load_latency_model(path: &Path) -> Result<LatencyModel> {
    persist::load_versioned(path, LATENCY_MODEL_KIND)
}
