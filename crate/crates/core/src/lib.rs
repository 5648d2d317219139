//! A small, fully simulated laboratory for learned join optimization.
//!
//! The crate is organized bottom-up:
//!
//! - [`catalog`]: synthetic schemas, statistics and join workloads.
//! - [`plans`]: logical join trees, physical plans, enumeration and validation.
//! - [`costmodel`]: the optimizer cost model and a hidden latency simulator that
//!   disagrees with it in controlled ways.
//! - [`expert`]: classical optimizers (subset DP and greedy), episode recording
//!   and completion of partial decisions.
//! - [`env`]: the bottom-up plan-construction environment.
//! - [`agent`]: a from-scratch value network with momentum SGD.
//! - [`trainers`]: cost, latency, demonstration, bootstrap and curriculum
//!   training loops, plus metrics and evaluation.

pub mod agent;
pub mod catalog;
pub mod costmodel;
pub mod env;
pub mod expert;
mod error;
pub mod persist;
pub mod plans;
pub mod trainers;

pub use error::{Error, Result};

pub use agent::{Agent, AgentConfig, NetworkParams, TrainerState};
pub use catalog::{Catalog, CatalogConfig, Query, RelId, Workload, WorkloadSpec};
pub use costmodel::{CostEstimate, LatencyConfig, LatencyModel, LatencySample};
pub use env::{Action, ActionKind, Env, EnvConfig, EnvState, RewardSpec, Stage};
pub use expert::{EpisodeHistory, ExpertKind, PartialDecisions};
pub use plans::{AccessPath, AggregateOperator, JoinOperator, JoinTree, PhysicalPlan, PlanNode};
pub use trainers::{BootstrapCalibration, CurriculumKind, CurriculumSchedule, Metrics};
