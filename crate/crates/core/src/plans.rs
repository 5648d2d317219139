//! Logical join trees, physical plans, exhaustive enumeration and validation.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Query, RelId};
use crate::{Error, Result};

/// Largest query [`enumerate_join_trees`] agrees to expand.
pub const ENUMERATION_LIMIT: usize = 7;

/// A bushy join tree; children are ordered (left is the build side).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinTree {
    Leaf(RelId),
    Join(Box<JoinTree>, Box<JoinTree>),
}

impl JoinTree {
    pub fn join(left: JoinTree, right: JoinTree) -> JoinTree {
        JoinTree::Join(Box::new(left), Box::new(right))
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<RelId> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<RelId>) {
        match self {
            JoinTree::Leaf(r) => out.push(*r),
            JoinTree::Join(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    pub fn min_relation(&self) -> RelId {
        match self {
            JoinTree::Leaf(r) => *r,
            JoinTree::Join(l, r) => l.min_relation().min(r.min_relation()),
        }
    }

    pub fn join_count(&self) -> usize {
        match self {
            JoinTree::Leaf(_) => 0,
            JoinTree::Join(l, r) => 1 + l.join_count() + r.join_count(),
        }
    }

    /// Internal nodes in post-order, each as its sorted relation set.
    pub fn join_nodes_postorder(&self) -> Vec<Vec<RelId>> {
        fn walk(t: &JoinTree, out: &mut Vec<Vec<RelId>>) -> Vec<RelId> {
            match t {
                JoinTree::Leaf(r) => vec![*r],
                JoinTree::Join(l, r) => {
                    let mut a = walk(l, out);
                    a.extend(walk(r, out));
                    a.sort_unstable();
                    out.push(a.clone());
                    a
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }
}

impl fmt::Display for JoinTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JoinTree::Leaf(r) => write!(f, "{r}"),
            JoinTree::Join(l, r) => write!(f, "({l} ⋈ {r})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessPath {
    Sequential,
    Index { attribute: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinOperator {
    NestedLoop,
    Hash,
}

impl JoinOperator {
    pub const ALL: [JoinOperator; 2] = [JoinOperator::NestedLoop, JoinOperator::Hash];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateOperator {
    Hash,
    Sort,
}

impl AggregateOperator {
    pub const ALL: [AggregateOperator; 2] = [AggregateOperator::Hash, AggregateOperator::Sort];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanNode {
    Scan {
        relation: RelId,
        access: AccessPath,
    },
    Join {
        operator: JoinOperator,
        left: Box<PlanNode>,
        right: Box<PlanNode>,
    },
}

impl PlanNode {
    pub fn leaves(&self) -> Vec<RelId> {
        self.join_tree().leaves()
    }

    /// The logical shape of this subtree.
    pub fn join_tree(&self) -> JoinTree {
        match self {
            PlanNode::Scan { relation, .. } => JoinTree::Leaf(*relation),
            PlanNode::Join { left, right, .. } => JoinTree::join(left.join_tree(), right.join_tree()),
        }
    }

    /// Access path per relation, in leaf order.
    pub fn access_paths(&self) -> Vec<(RelId, AccessPath)> {
        let mut out = Vec::new();
        fn walk(n: &PlanNode, out: &mut Vec<(RelId, AccessPath)>) {
            match n {
                PlanNode::Scan { relation, access } => out.push((*relation, *access)),
                PlanNode::Join { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    /// Join operators in post-order, matching [`JoinTree::join_nodes_postorder`].
    pub fn join_operators_postorder(&self) -> Vec<JoinOperator> {
        let mut out = Vec::new();
        fn walk(n: &PlanNode, out: &mut Vec<JoinOperator>) {
            if let PlanNode::Join { operator, left, right } = n {
                walk(left, out);
                walk(right, out);
                out.push(*operator);
            }
        }
        walk(self, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhysicalPlan {
    pub root: PlanNode,
    pub aggregate: Option<AggregateOperator>,
}

impl fmt::Display for PhysicalPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn node(n: &PlanNode, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match n {
                PlanNode::Scan { relation, access: AccessPath::Sequential } => write!(f, "seq({relation})"),
                PlanNode::Scan { relation, access: AccessPath::Index { attribute } } => {
                    write!(f, "idx({relation}.{attribute})")
                }
                PlanNode::Join { operator, left, right } => {
                    let op = match operator {
                        JoinOperator::NestedLoop => "NL",
                        JoinOperator::Hash => "HJ",
                    };
                    write!(f, "{op}(")?;
                    node(left, f)?;
                    write!(f, ", ")?;
                    node(right, f)?;
                    write!(f, ")")
                }
            }
        }
        match self.aggregate {
            Some(a) => {
                write!(f, "{a:?}Agg[")?;
                node(&self.root, f)?;
                write!(f, "]")
            }
            None => node(&self.root, f),
        }
    }
}

/// Every bushy join tree over the query's relations, children ordered.
///
/// Cross products are included; the result has `count_join_orderings(n)` entries.
pub fn enumerate_join_trees(query: &Query) -> Result<Vec<JoinTree>> {
    let n = query.len();
    if n == 0 {
        return Err(Error::contract("query has no relations"));
    }
    if n > ENUMERATION_LIMIT {
        return Err(Error::Refused(format!(
            "enumerating {n} relations exceeds the limit of {ENUMERATION_LIMIT}"
        )));
    }
    fn trees(rels: &[RelId], mask: u32) -> Vec<JoinTree> {
        if mask.count_ones() == 1 {
            return vec![JoinTree::Leaf(rels[mask.trailing_zeros() as usize])];
        }
        let mut out = Vec::new();
        // all nonempty proper submasks as the left child
        let mut sub = (mask - 1) & mask;
        while sub != 0 {
            let lefts = trees(rels, sub);
            let rights = trees(rels, mask ^ sub);
            for l in &lefts {
                for r in &rights {
                    out.push(JoinTree::join(l.clone(), r.clone()));
                }
            }
            sub = (sub - 1) & mask;
        }
        out
    }
    Ok(trees(&query.relation_ids, (1u32 << n) - 1))
}

/// `n! * Catalan(n-1)`, i.e. `(2n-2)! / (n-1)!`: ordered bushy trees over `n` leaves.
pub fn count_join_orderings(n: u32) -> BigUint {
    assert!(n >= 1, "count_join_orderings needs n >= 1");
    (n..=2 * n - 2).fold(BigUint::from(1u32), |acc, k| acc * k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanValidationReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

impl PlanValidationReport {
    fn from_violations(violations: Vec<String>) -> Self {
        PlanValidationReport {
            ok: violations.is_empty(),
            violations,
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid plan: {}", self.violations.join("; "))))
        }
    }
}

/// Whether an index scan on `rel.attribute` is usable for `query`: the
/// attribute must be indexed and carry a selection or join predicate.
pub fn index_usable(catalog: &Catalog, query: &Query, rel: RelId, attribute: u32) -> bool {
    let Some(info) = catalog.relation(rel) else {
        return false;
    };
    if !info.is_indexed(attribute) {
        return false;
    }
    query
        .selection_predicates
        .iter()
        .any(|p| p.relation == rel && p.attribute == attribute)
        || query
            .join_predicates
            .iter()
            .any(|&e| catalog.join_edges[e].attribute_of(rel) == Some(attribute))
}

/// Access paths available to `rel` in `query`: sequential first, then usable
/// indexes by attribute id.
pub fn available_access_paths(catalog: &Catalog, query: &Query, rel: RelId) -> Vec<AccessPath> {
    let mut out = vec![AccessPath::Sequential];
    if let Some(info) = catalog.relation(rel) {
        for a in &info.attributes {
            if index_usable(catalog, query, rel, a.id) {
                out.push(AccessPath::Index { attribute: a.id });
            }
        }
    }
    out
}

pub fn validate_plan(plan: &PhysicalPlan, query: &Query, catalog: &Catalog) -> PlanValidationReport {
    let mut violations = Vec::new();
    let scans = plan.root.access_paths();
    let leaves: Vec<RelId> = scans.iter().map(|(r, _)| *r).collect();
    let leaf_set: BTreeSet<RelId> = leaves.iter().copied().collect();
    if leaf_set.len() != leaves.len() {
        violations.push("duplicate leaf relation".to_string());
    }
    let expected: BTreeSet<RelId> = query.relation_ids.iter().copied().collect();
    if leaf_set != expected {
        violations.push(format!(
            "leaf set mismatch: plan has {:?}, query has {:?}",
            leaf_set.iter().map(|r| r.0).collect::<Vec<_>>(),
            expected.iter().map(|r| r.0).collect::<Vec<_>>()
        ));
    }
    for (rel, access) in scans {
        let Some(info) = catalog.relation(rel) else {
            violations.push(format!("unknown relation {rel}"));
            continue;
        };
        if let AccessPath::Index { attribute } = access {
            if !info.is_indexed(attribute) {
                violations.push(format!("no such index: {rel}.{attribute}"));
            } else if !index_usable(catalog, query, rel, attribute) {
                violations.push(format!("index scan on {rel}.{attribute} has no matching predicate"));
            }
        }
    }
    match (plan.aggregate.is_some(), query.aggregate) {
        (true, false) => violations.push("aggregate node present but query has no aggregate".to_string()),
        (false, true) => violations.push("aggregate node missing".to_string()),
        _ => {}
    }
    PlanValidationReport::from_violations(violations)
}
