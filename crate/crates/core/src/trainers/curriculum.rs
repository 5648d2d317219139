//! Curricula over the two difficulty axes: how many pipeline stages the agent
//! controls and how many relations its queries join.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{eligible, median, EpisodeRecord, EpisodeSpec, Metrics, Session, TrainOptions, World};
use crate::agent::Agent;
use crate::env::{EnvConfig, RewardSpec};
use crate::{Error, Result};

pub const MAX_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumKind {
    /// One more pipeline stage per phase, all relations throughout.
    Pipeline,
    /// All stages throughout, one more relation per phase.
    Relations,
    /// Both axes together until stages saturate, then relations alone.
    Hybrid,
}

impl fmt::Display for CurriculumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurriculumKind::Pipeline => "pipeline",
            CurriculumKind::Relations => "relations",
            CurriculumKind::Hybrid => "hybrid",
        })
    }
}

impl FromStr for CurriculumKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pipeline" => Ok(CurriculumKind::Pipeline),
            "relations" => Ok(CurriculumKind::Relations),
            "hybrid" => Ok(CurriculumKind::Hybrid),
            other => Err(Error::config("curriculum", format!("unknown curriculum `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub stages: usize,
    pub max_relations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub kind: CurriculumKind,
    pub phases: Vec<CurriculumPhase>,
    /// Episodes per advancement window.
    pub window: usize,
    /// Advance once the window median cost ratio is at most this.
    pub ratio_threshold: f64,
    /// Episode budget of each phase.
    pub phase_budget: usize,
}

impl CurriculumSchedule {
    /// Phases for queries of up to `max_relations` relations.
    pub fn generate(kind: CurriculumKind, max_relations: usize, phase_budget: usize) -> Result<Self> {
        if max_relations == 0 {
            return Err(Error::config("env.max_relations", "must be positive"));
        }
        let phase = |stages, max_relations| CurriculumPhase { stages, max_relations };
        let phases = match kind {
            CurriculumKind::Pipeline => (1..=MAX_STAGES).map(|s| phase(s, max_relations)).collect(),
            CurriculumKind::Relations => (1..=max_relations).map(|r| phase(MAX_STAGES, r)).collect(),
            CurriculumKind::Hybrid => {
                let mut out: Vec<CurriculumPhase> = Vec::new();
                for k in 1.. {
                    let p = phase(k.min(MAX_STAGES), (k + 1).min(max_relations));
                    if out.last() != Some(&p) {
                        out.push(p);
                    }
                    if p == phase(MAX_STAGES, max_relations) {
                        break;
                    }
                }
                out
            }
        };
        let schedule = CurriculumSchedule {
            kind,
            phases,
            window: 100,
            ratio_threshold: 1.1,
            phase_budget,
        };
        schedule.check()?;
        Ok(schedule)
    }

    /// Checks the ordering invariant of the schedule's kind.
    pub fn check(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::config("curriculum.phases", reason));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        if self
            .phases
            .iter()
            .any(|p| !(1..=MAX_STAGES).contains(&p.stages) || p.max_relations == 0)
        {
            return bad("phase outside 1..=4 stages or without relations".into());
        }
        for w in self.phases.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ok = match self.kind {
                CurriculumKind::Pipeline => b.stages > a.stages && b.max_relations == a.max_relations,
                CurriculumKind::Relations => {
                    a.stages == MAX_STAGES && b.stages == MAX_STAGES && b.max_relations > a.max_relations
                }
                CurriculumKind::Hybrid => {
                    let weak = b.stages >= a.stages && b.max_relations >= a.max_relations;
                    let strict = b.stages > a.stages || b.max_relations > a.max_relations;
                    // once relations grow alone, stages must already be saturated
                    let saturated = b.stages > a.stages || a.stages == MAX_STAGES;
                    weak && strict && saturated
                }
            };
            if !ok {
                return bad(format!("{} schedule breaks its ordering at {a:?} -> {b:?}", self.kind));
            }
        }
        if self.kind == CurriculumKind::Relations && self.phases[0].stages != MAX_STAGES {
            return bad("relations schedule must enable every stage".into());
        }
        Ok(())
    }

    pub fn phase_label(&self, index: usize) -> String {
        format!("{}-{}", self.kind, index + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseDecision {
    Stay,
    Advance { budget_exhausted: bool },
    Done { budget_exhausted: bool },
}

/// Decides whether the current phase is finished, given its records so far.
pub fn next_phase(schedule: &CurriculumSchedule, phase: usize, recent: &[EpisodeRecord]) -> Result<PhaseDecision> {
    if phase >= schedule.phases.len() {
        return Err(Error::contract(format!("phase {phase} is out of range")));
    }
    let window_ok = schedule.window > 0
        && recent.len() >= schedule.window
        && median(
            &recent[recent.len() - schedule.window..]
                .iter()
                .map(|r| r.cost_ratio)
                .collect::<Vec<_>>(),
        )
        .is_some_and(|m| m <= schedule.ratio_threshold);
    let exhausted = recent.len() >= schedule.phase_budget;
    if !window_ok && !exhausted {
        return Ok(PhaseDecision::Stay);
    }
    let budget_exhausted = !window_ok;
    Ok(if phase + 1 == schedule.phases.len() {
        PhaseDecision::Done { budget_exhausted }
    } else {
        PhaseDecision::Advance { budget_exhausted }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumOutcome {
    pub metrics: Metrics,
    /// The agent as it stood at the end of each phase.
    pub snapshots: Vec<(CurriculumPhase, EnvConfig, Agent)>,
}

/// Runs the phases in order with one agent; the replay buffer is cleared and
/// the epsilon schedule restarts at each phase.
pub fn train_curriculum(
    world: World<'_>,
    agent: &mut Agent,
    max_relations: usize,
    schedule: &CurriculumSchedule,
    options: &TrainOptions,
) -> Result<CurriculumOutcome> {
    schedule.check()?;
    if schedule.phase_budget == 0 {
        return Err(Error::config("curriculum.phase_budget", "must be positive"));
    }
    let mut envs = Vec::new();
    let mut pools = Vec::new();
    for (i, p) in schedule.phases.iter().enumerate() {
        if p.max_relations > max_relations {
            return Err(Error::config(
                "curriculum.phases",
                format!("phase {} needs {} relations, environment allows {max_relations}", i + 1, p.max_relations),
            ));
        }
        let env = EnvConfig {
            stages: p.stages,
            max_relations,
            reward: RewardSpec::Cost,
        };
        env.validate()?;
        let pool = eligible(world.queries, p.max_relations);
        if pool.is_empty() {
            return Err(Error::config(
                "workload",
                format!("phase {} has no query with at most {} relations", i + 1, p.max_relations),
            ));
        }
        envs.push(env);
        pools.push(pool);
    }

    let mut session = Session::new(world, options.clone(), agent)?;
    let mut metrics = Metrics::default();
    let mut snapshots = Vec::new();
    for (index, phase) in schedule.phases.iter().enumerate() {
        session.clear_replay();
        let label = schedule.phase_label(index);
        let start = metrics.records.len();
        loop {
            let i = metrics.records.len() - start;
            let spec = EpisodeSpec {
                env: &envs[index],
                epsilon: options.epsilon_for(agent, i, schedule.phase_budget),
                phase: &label,
                timeout: options.timeout,
                mix: None,
                slip_active: false,
            };
            let q = pools[index][i % pools[index].len()];
            metrics.records.push(session.run(agent, q, &spec)?);
            match next_phase(schedule, index, &metrics.records[start..])? {
                PhaseDecision::Stay => continue,
                PhaseDecision::Advance { budget_exhausted } | PhaseDecision::Done { budget_exhausted } => {
                    if budget_exhausted {
                        metrics.flags.push(format!("{label} ended on its episode budget"));
                    }
                    break;
                }
            }
        }
        snapshots.push((*phase, envs[index].clone(), agent.clone()));
    }
    Ok(CurriculumOutcome { metrics, snapshots })
}
