//! Synthetic schemas, statistics and join-query workloads.
//!
//! Nothing here produces tuples. A [`Catalog`] only carries the statistics the
//! cost model needs: relation cardinalities, per-attribute distinct counts,
//! secondary indexes and join edges with explicit selectivities.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::persist;
use crate::{Error, Result};

/// Identifier of a relation; equal to its position in [`Catalog::relations`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelId(pub u32);

impl RelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    BTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub id: u32,
    pub name: String,
    pub distinct_values: u64,
    pub indexed_by: Option<IndexKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub id: RelId,
    pub name: String,
    pub cardinality: u64,
    pub attributes: Vec<AttributeInfo>,
}

impl RelationInfo {
    pub fn attribute(&self, id: u32) -> Option<&AttributeInfo> {
        self.attributes.get(id as usize)
    }

    pub fn is_indexed(&self, attribute: u32) -> bool {
        self.attribute(attribute)
            .is_some_and(|a| a.indexed_by.is_some())
    }
}

/// An equi-join predicate between two relations. `left < right` always.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub left: RelId,
    pub left_attr: u32,
    pub right: RelId,
    pub right_attr: u32,
    pub selectivity: f64,
}

impl JoinEdge {
    pub fn touches(&self, rel: RelId) -> bool {
        self.left == rel || self.right == rel
    }

    /// Attribute of `rel` taking part in this edge, if `rel` is an endpoint.
    pub fn attribute_of(&self, rel: RelId) -> Option<u32> {
        if self.left == rel {
            Some(self.left_attr)
        } else if self.right == rel {
            Some(self.right_attr)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub relations: Vec<RelationInfo>,
    pub join_edges: Vec<JoinEdge>,
}

impl Catalog {
    pub fn relation(&self, id: RelId) -> Option<&RelationInfo> {
        self.relations.get(id.index())
    }

    pub fn max_cardinality(&self) -> u64 {
        self.relations.iter().map(|r| r.cardinality).max().unwrap_or(1)
    }

    /// Checks every structural invariant of a catalog.
    pub fn check(&self) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::contract("catalog has no relations"));
        }
        for (i, rel) in self.relations.iter().enumerate() {
            if rel.id.index() != i {
                return Err(Error::contract(format!("relation at position {i} has id {}", rel.id)));
            }
            if rel.cardinality == 0 {
                return Err(Error::contract(format!("{} has zero cardinality", rel.id)));
            }
            if rel.attributes.is_empty() {
                return Err(Error::contract(format!("{} has no attributes", rel.id)));
            }
            for (j, a) in rel.attributes.iter().enumerate() {
                if a.id as usize != j || a.distinct_values == 0 || a.distinct_values > rel.cardinality {
                    return Err(Error::contract(format!("{}.{} violates attribute invariants", rel.id, a.id)));
                }
            }
        }
        for e in &self.join_edges {
            let ok = self.relation(e.left).is_some_and(|r| r.attribute(e.left_attr).is_some())
                && self.relation(e.right).is_some_and(|r| r.attribute(e.right_attr).is_some())
                && e.left < e.right
                && e.selectivity > 0.0
                && e.selectivity <= 1.0;
            if !ok {
                return Err(Error::contract(format!("bad join edge {}-{}", e.left, e.right)));
            }
        }
        let all: Vec<RelId> = self.relations.iter().map(|r| r.id).collect();
        if !self.is_connected(&all) {
            return Err(Error::contract("catalog join graph is not connected"));
        }
        Ok(())
    }

    /// Edge ids whose endpoints both lie in `rels`, ascending.
    pub fn edges_within(&self, rels: &BTreeSet<RelId>) -> Vec<usize> {
        self.join_edges
            .iter()
            .enumerate()
            .filter(|(_, e)| rels.contains(&e.left) && rels.contains(&e.right))
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether the join graph induced on `rels` is connected.
    pub fn is_connected(&self, rels: &[RelId]) -> bool {
        let set: BTreeSet<RelId> = rels.iter().copied().collect();
        let edges: Vec<(RelId, RelId)> = self
            .edges_within(&set)
            .into_iter()
            .map(|i| (self.join_edges[i].left, self.join_edges[i].right))
            .collect();
        connected(&set, &edges)
    }

    pub fn neighbors(&self, rel: RelId) -> impl Iterator<Item = RelId> + '_ {
        self.join_edges.iter().filter_map(move |e| {
            if e.left == rel {
                Some(e.right)
            } else if e.right == rel {
                Some(e.left)
            } else {
                None
            }
        })
    }
}

pub(crate) fn connected(nodes: &BTreeSet<RelId>, edges: &[(RelId, RelId)]) -> bool {
    let Some(&start) = nodes.iter().next() else {
        return false;
    };
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        for &(a, b) in edges {
            let next = if a == n {
                b
            } else if b == n {
                a
            } else {
                continue;
            };
            if nodes.contains(&next) && seen.insert(next) {
                stack.push(next);
            }
        }
    }
    seen.len() == nodes.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPredicate {
    pub relation: RelId,
    pub attribute: u32,
    pub selectivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u32,
    /// Sorted ascending, no duplicates.
    pub relation_ids: Vec<RelId>,
    /// Ids into [`Catalog::join_edges`]: every edge with both endpoints in the query.
    pub join_predicates: Vec<usize>,
    pub selection_predicates: Vec<SelectionPredicate>,
    pub aggregate: bool,
}

impl Query {
    pub fn len(&self) -> usize {
        self.relation_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relation_ids.is_empty()
    }

    pub fn position(&self, rel: RelId) -> Option<usize> {
        self.relation_ids.binary_search(&rel).ok()
    }

    pub fn contains(&self, rel: RelId) -> bool {
        self.position(rel).is_some()
    }

    pub fn check(&self, catalog: &Catalog) -> Result<()> {
        if self.relation_ids.is_empty() {
            return Err(Error::contract(format!("query {} has no relations", self.id)));
        }
        if self.relation_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!("query {} relation ids not sorted/unique", self.id)));
        }
        if self.relation_ids.iter().any(|r| catalog.relation(*r).is_none()) {
            return Err(Error::contract(format!("query {} references unknown relation", self.id)));
        }
        for &e in &self.join_predicates {
            let edge = catalog
                .join_edges
                .get(e)
                .ok_or_else(|| Error::contract(format!("query {} references unknown edge {e}", self.id)))?;
            if !self.contains(edge.left) || !self.contains(edge.right) {
                return Err(Error::contract(format!("query {} edge {e} leaves the relation set", self.id)));
            }
        }
        for p in &self.selection_predicates {
            if !self.contains(p.relation) || !(p.selectivity > 0.0 && p.selectivity <= 1.0) {
                return Err(Error::contract(format!("query {} has a bad selection predicate", self.id)));
            }
        }
        let edges: Vec<(RelId, RelId)> = self
            .join_predicates
            .iter()
            .map(|&e| (catalog.join_edges[e].left, catalog.join_edges[e].right))
            .collect();
        if !connected(&self.relation_ids.iter().copied().collect(), &edges) {
            return Err(Error::contract(format!("query {} join graph is disconnected", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub queries: Vec<Query>,
    pub generator_seed: u64,
}

impl Workload {
    /// Queries with at most `max_relations` relations, in workload order.
    pub fn filter_max_relations(&self, max_relations: usize) -> Vec<Query> {
        self.queries
            .iter()
            .filter(|q| q.len() <= max_relations)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub relation_count: usize,
    pub min_cardinality: u64,
    pub max_cardinality: u64,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Probability that a relation gets one secondary index.
    pub index_density: f64,
    /// Probability that a non-spanning-tree pair gets an extra join edge.
    pub edge_density: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            relation_count: 16,
            min_cardinality: 100,
            max_cardinality: 1_000_000,
            min_attributes: 2,
            max_attributes: 5,
            index_density: 0.5,
            edge_density: 0.1,
        }
    }
}

impl CatalogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.relation_count == 0 {
            return Err(Error::config("relation_count", "must be at least 1"));
        }
        if self.min_cardinality < 1 || self.max_cardinality > 1_000_000_000 {
            return Err(Error::config("min_cardinality", "cardinality range must lie within [1, 1e9]"));
        }
        if self.min_cardinality > self.max_cardinality {
            return Err(Error::config("max_cardinality", "must be >= min_cardinality"));
        }
        if self.min_attributes == 0 || self.min_attributes > self.max_attributes {
            return Err(Error::config("min_attributes", "need 1 <= min_attributes <= max_attributes"));
        }
        for (field, p) in [("index_density", self.index_density), ("edge_density", self.edge_density)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn log_uniform_u64(rng: &mut impl Rng, lo: u64, hi: u64) -> u64 {
    if lo >= hi {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64 + 1.0).ln());
    let x = rng.random_range(a..b).exp().floor() as u64;
    x.clamp(lo, hi)
}

/// Generates a connected synthetic catalog; a pure function of `(config, seed)`.
///
/// Join edges are a random spanning tree plus, for every other pair, an extra
/// edge with probability `edge_density`.
pub fn generate_catalog(config: &CatalogConfig, seed: u64) -> Result<Catalog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut relations = Vec::with_capacity(config.relation_count);
    for i in 0..config.relation_count {
        let cardinality = log_uniform_u64(&mut rng, config.min_cardinality, config.max_cardinality);
        let n_attrs = rng.random_range(config.min_attributes..=config.max_attributes);
        let mut attributes: Vec<AttributeInfo> = (0..n_attrs as u32)
            .map(|a| AttributeInfo {
                id: a,
                name: if a == 0 { "id".to_string() } else { format!("a{a}") },
                // attribute 0 is a key
                distinct_values: if a == 0 {
                    cardinality
                } else {
                    log_uniform_u64(&mut rng, 1, cardinality)
                },
                indexed_by: None,
            })
            .collect();
        if rng.random_bool(config.index_density) {
            let a = rng.random_range(0..attributes.len());
            attributes[a].indexed_by = Some(IndexKind::BTree);
        }
        relations.push(RelationInfo {
            id: RelId(i as u32),
            name: format!("t{i}"),
            cardinality,
            attributes,
        });
    }

    let n = relations.len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        pairs.push((j, i));
    }
    for a in 0..n {
        for b in a + 1..n {
            if pairs.contains(&(a, b)) {
                continue;
            }
            if rng.random_bool(config.edge_density) {
                pairs.push((a, b));
            }
        }
    }
    pairs.sort_unstable();

    let join_edges = pairs
        .into_iter()
        .map(|(a, b)| {
            let la = rng.random_range(0..relations[a].attributes.len()) as u32;
            let rb = rng.random_range(0..relations[b].attributes.len()) as u32;
            let da = relations[a].attributes[la as usize].distinct_values;
            let db = relations[b].attributes[rb as usize].distinct_values;
            JoinEdge {
                left: RelId(a as u32),
                left_attr: la,
                right: RelId(b as u32),
                right_attr: rb,
                selectivity: 1.0 / da.max(db) as f64,
            }
        })
        .collect();

    let catalog = Catalog {
        relations,
        join_edges,
    };
    debug_assert!(catalog.check().is_ok());
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub query_count: usize,
    pub min_relations: usize,
    pub max_relations: usize,
    /// Probability that a relation in a query carries a selection predicate.
    pub selection_density: f64,
    pub aggregate_probability: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            query_count: 100,
            min_relations: 4,
            max_relations: 7,
            selection_density: 0.5,
            aggregate_probability: 0.3,
        }
    }
}

impl WorkloadSpec {
    /// Checks that do not depend on the catalog.
    pub fn validate(&self) -> Result<()> {
        if self.min_relations == 0 {
            return Err(Error::config("min_relations", "must be at least 1"));
        }
        if self.min_relations > self.max_relations {
            return Err(Error::config("max_relations", "must be >= min_relations"));
        }
        for (field, p) in [
            ("selection_density", self.selection_density),
            ("aggregate_probability", self.aggregate_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

const SUBSET_RETRIES: usize = 64;
const MIN_SELECTION_SELECTIVITY: f64 = 1e-4;

/// Generates a workload of connected join queries; a pure function of its inputs.
pub fn generate_workload(catalog: &Catalog, spec: &WorkloadSpec, seed: u64) -> Result<Workload> {
    spec.validate()?;
    if spec.max_relations > catalog.relations.len() {
        return Err(Error::config(
            "max_relations",
            format!("exceeds catalog size {}", catalog.relations.len()),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(spec.query_count);
    for id in 0..spec.query_count as u32 {
        let k = rng.random_range(spec.min_relations..=spec.max_relations);
        let rels = connected_subset(catalog, k, &mut rng).ok_or_else(|| {
            Error::Generation(format!(
                "no connected subset of {k} relations found after {SUBSET_RETRIES} attempts"
            ))
        })?;

        let mut selection_predicates = Vec::new();
        for &r in &rels {
            if !rng.random_bool(spec.selection_density) {
                continue;
            }
            let rel = &catalog.relations[r.index()];
            let indexed: Vec<u32> = rel
                .attributes
                .iter()
                .filter(|a| a.indexed_by.is_some())
                .map(|a| a.id)
                .collect();
            // Favor indexed attributes so the access-path stage has real choices.
            let attribute = match indexed.choose(&mut rng) {
                Some(&a) if rng.random_bool(0.5) => a,
                _ => rng.random_range(0..rel.attributes.len()) as u32,
            };
            let lo = MIN_SELECTION_SELECTIVITY.ln();
            let selectivity = rng.random_range(lo..0.0f64).exp();
            selection_predicates.push(SelectionPredicate {
                relation: r,
                attribute,
                selectivity,
            });
        }
        let aggregate = rng.random_bool(spec.aggregate_probability);
        let set: BTreeSet<RelId> = rels.iter().copied().collect();
        queries.push(Query {
            id,
            relation_ids: set.iter().copied().collect(),
            join_predicates: catalog.edges_within(&set),
            selection_predicates,
            aggregate,
        });
    }
    Ok(Workload {
        queries,
        generator_seed: seed,
    })
}

fn connected_subset(catalog: &Catalog, k: usize, rng: &mut impl Rng) -> Option<Vec<RelId>> {
    let n = catalog.relations.len();
    for _ in 0..SUBSET_RETRIES {
        let start = RelId(rng.random_range(0..n) as u32);
        let mut chosen = vec![start];
        while chosen.len() < k {
            let mut frontier: Vec<RelId> = chosen
                .iter()
                .flat_map(|&r| catalog.neighbors(r))
                .filter(|r| !chosen.contains(r))
                .collect();
            frontier.sort_unstable();
            frontier.dedup();
            match frontier.choose(rng) {
                Some(&next) => chosen.push(next),
                None => break,
            }
        }
        if chosen.len() == k {
            return Some(chosen);
        }
    }
    None
}

pub const CATALOG_KIND: &str = "catalog";
pub const WORKLOAD_KIND: &str = "workload";

pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    persist::save_versioned(path, CATALOG_KIND, catalog)
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let catalog: Catalog = persist::load_versioned(path, CATALOG_KIND)?;
    catalog.check().map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(catalog)
}

pub fn save_workload(path: &Path, workload: &Workload) -> Result<()> {
    persist::save_versioned(path, WORKLOAD_KIND, workload)
}

pub fn load_workload(path: &Path) -> Result<Workload> {
    persist::load_versioned(path, WORKLOAD_KIND)
}
