//! Fixtures shared by the benchmarks.

use qolab::catalog::{generate_catalog, generate_workload};
use qolab::costmodel::build_latency_model;
use qolab::{Catalog, CatalogConfig, LatencyConfig, LatencyModel, Query, WorkloadSpec};

pub struct Fixture {
    pub catalog: Catalog,
    pub latency: LatencyModel,
}

impl Fixture {
    pub fn new() -> Self {
        let catalog = generate_catalog(&CatalogConfig::default(), 42).expect("default catalog");
        let latency = build_latency_model(&catalog, &LatencyConfig::default(), 42).expect("default model");
        Fixture { catalog, latency }
    }

    /// One pinned query with exactly `n` relations.
    pub fn query(&self, n: usize) -> Query {
        let spec = WorkloadSpec { query_count: 1, min_relations: n, max_relations: n, ..WorkloadSpec::default() };
        generate_workload(&self.catalog, &spec, n as u64).expect("workload").queries.remove(0)
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
