//! Experiment configuration: a TOML file plus `--set key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qolab::trainers::bootstrap::BootstrapOptions;
use qolab::trainers::lfd::{FinetuneOptions, PretrainOptions, SlipConfig};
use qolab::trainers::{TimeoutBudget, TrainOptions};
use qolab::{AgentConfig, CatalogConfig, CurriculumKind, EnvConfig, ExpertKind, LatencyConfig, RewardSpec, WorkloadSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    Vanilla,
    NaiveLatency,
    Lfd,
    Bootstrap,
    Curriculum(CurriculumKind),
}

impl TrainerKind {
    /// File-system friendly name.
    pub fn slug(self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerKind::Vanilla => f.write_str("vanilla"),
            TrainerKind::NaiveLatency => f.write_str("naive-latency"),
            TrainerKind::Lfd => f.write_str("lfd"),
            TrainerKind::Bootstrap => f.write_str("bootstrap"),
            TrainerKind::Curriculum(k) => write!(f, "curriculum:{k}"),
        }
    }
}

impl FromStr for TrainerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(TrainerKind::Vanilla),
            "naive-latency" => Ok(TrainerKind::NaiveLatency),
            "lfd" => Ok(TrainerKind::Lfd),
            "bootstrap" => Ok(TrainerKind::Bootstrap),
            _ => match s.strip_prefix("curriculum:").map(CurriculumKind::from_str) {
                Some(Ok(k)) => Ok(TrainerKind::Curriculum(k)),
                _ => Err(format!(
                    "unknown trainer `{s}` (expected vanilla, naive-latency, lfd, bootstrap, \
                     curriculum:pipeline, curriculum:relations or curriculum:hybrid)"
                )),
            },
        }
    }
}

impl Serialize for TrainerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every random stream of an experiment, one seed per concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub catalog: u64,
    pub workload: u64,
    pub model: u64,
    pub agent: u64,
    pub execution: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// Ignored by curriculum trainers, whose schedule sets the stages.
    pub stages: usize,
    pub max_relations: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection { stages: 1, max_relations: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let d = AgentConfig::default();
        AgentSection {
            hidden: d.hidden,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
            epsilon_start: d.epsilon_start,
            epsilon_end: d.epsilon_end,
            epsilon_decay_fraction: d.epsilon_decay_fraction,
        }
    }
}

impl AgentSection {
    pub fn to_config(&self, seed: u64) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden.clone(),
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_decay_fraction: self.epsilon_decay_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfdSection {
    /// Optimizer whose recorded plans are imitated.
    pub expert: ExpertKind,
    pub passes: usize,
    pub holdout_fraction: f64,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
    pub slip: SlipConfig,
    pub mix_fraction: f64,
}

impl Default for LfdSection {
    fn default() -> Self {
        let p = PretrainOptions::default();
        let f = FinetuneOptions::default();
        LfdSection {
            expert: ExpertKind::Dp,
            passes: p.passes,
            holdout_fraction: p.holdout_fraction,
            pretrain_learning_rate: p.learning_rate,
            pretrain_batch_size: p.batch_size,
            slip: f.slip,
            mix_fraction: f.mix_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub phase1_cap: usize,
    pub convergence_window: usize,
    pub convergence_epsilon: f64,
    pub calibration_window: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let d = BootstrapOptions::default();
        BootstrapSection {
            phase1_cap: d.phase1_cap,
            convergence_window: d.convergence_window,
            convergence_epsilon: d.convergence_epsilon,
            calibration_window: d.calibration_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub phase_budget: usize,
    pub window: usize,
    pub ratio_threshold: f64,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection { phase_budget: 2000, window: 100, ratio_threshold: 1.1 }
    }
}

/// `episodes` is the run length of vanilla and naive-latency training, the
/// fine-tuning length for `lfd` and the phase-2 length for `bootstrap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub kind: TrainerKind,
    #[serde(default = "defaults::episodes")]
    pub episodes: usize,
    #[serde(default = "defaults::warmup_episodes")]
    pub warmup_episodes: usize,
    #[serde(default = "defaults::updates_per_episode")]
    pub updates_per_episode: usize,
    #[serde(default = "defaults::replay_capacity")]
    pub replay_capacity: usize,
    #[serde(default = "defaults::timeout")]
    pub timeout: TimeoutBudget,
    /// Fixed exploration rate instead of the agent's schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub lfd: LfdSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub curriculum: CurriculumSection,
}

mod defaults {
    use super::*;

    pub fn episodes() -> usize {
        TrainOptions::default().episodes
    }
    pub fn warmup_episodes() -> usize {
        TrainOptions::default().warmup_episodes
    }
    pub fn updates_per_episode() -> usize {
        TrainOptions::default().updates_per_episode
    }
    pub fn replay_capacity() -> usize {
        TrainOptions::default().replay_capacity
    }
    pub fn timeout() -> TimeoutBudget {
        TrainOptions::default().timeout
    }
    pub fn execution_seeds() -> Vec<u64> {
        (0..5).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub expert: ExpertKind,
    pub execution_seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { expert: ExpertKind::Dp, execution_seeds: defaults::execution_seeds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    #[serde(default)]
    pub catalog: CatalogConfig,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub agent: AgentSection,
    pub trainer: TrainerSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// The generator inputs an artifact set depends on.
#[derive(Serialize)]
struct WorldInputs<'a> {
    catalog: &'a CatalogConfig,
    workload: &'a WorkloadSpec,
    latency: &'a LatencyConfig,
    catalog_seed: u64,
    workload_seed: u64,
    model_seed: u64,
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` (`dotted.key=value`) and validates.
    /// A relative `output_dir` is resolved against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        let mut config = Self::parse(&text, overrides)?;
        if config.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::config("<file>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for (section, key, hint) in [
            ("agent", "seed", "set seeds.agent"),
            ("trainer", "execution_seed", "set seeds.execution"),
        ] {
            if table.get(section).and_then(|s| s.get(key)).is_some() {
                return Err(CliError::config(format!("{section}.{key}"), format!("not allowed here; {hint}")));
            }
        }
        let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            CliError::config(field, e.into_inner().message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let within = |section: &str, r: qolab::Result<()>| {
            r.map_err(|e| match e {
                qolab::Error::Config { field, reason } if !field.contains('.') => {
                    CliError::config(format!("{section}.{field}"), reason)
                }
                other => other.into(),
            })
        };
        within("catalog", self.catalog.validate())?;
        within("workload", self.workload.validate())?;
        within("latency", self.latency.validate())?;
        within("env", self.env_config().validate())?;
        self.agent_config(self.seeds.agent).validate()?;
        self.train_options(self.seeds.execution).validate()?;
        if self.env.max_relations < self.workload.max_relations {
            return Err(CliError::config(
                "env.max_relations",
                format!("must cover workload.max_relations = {}", self.workload.max_relations),
            ));
        }
        if self.eval.execution_seeds.is_empty() {
            return Err(CliError::config("eval.execution_seeds", "needs at least one seed"));
        }
        if let TrainerKind::Curriculum(_) = self.trainer.kind {
            if self.trainer.curriculum.phase_budget == 0 {
                return Err(CliError::config("trainer.curriculum.phase_budget", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        qolab::persist::digest_hex(json.as_bytes())
    }

    /// Digest of the inputs that determine generated artifacts.
    pub fn world_digest(&self) -> String {
        let inputs = WorldInputs {
            catalog: &self.catalog,
            workload: &self.workload,
            latency: &self.latency,
            catalog_seed: self.seeds.catalog,
            workload_seed: self.seeds.workload,
            model_seed: self.seeds.model,
        };
        qolab::persist::digest_hex(serde_json::to_string(&inputs).expect("inputs serialize").as_bytes())
    }

    pub fn reward(&self) -> RewardSpec {
        match self.trainer.kind {
            TrainerKind::NaiveLatency | TrainerKind::Lfd => RewardSpec::Latency,
            _ => RewardSpec::Cost,
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { stages: self.env.stages, max_relations: self.env.max_relations, reward: self.reward() }
    }

    pub fn agent_config(&self, seed: u64) -> AgentConfig {
        self.agent.to_config(seed)
    }

    pub fn train_options(&self, execution_seed: u64) -> TrainOptions {
        let t = &self.trainer;
        TrainOptions {
            episodes: t.episodes,
            warmup_episodes: t.warmup_episodes,
            updates_per_episode: t.updates_per_episode,
            replay_capacity: t.replay_capacity,
            execution_seed,
            timeout: t.timeout,
            epsilon: t.epsilon,
        }
    }

    /// The same experiment with its agent and execution seeds shifted by `r`.
    pub fn replica(&self, r: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seeds.agent = c.seeds.agent.wrapping_add(r);
        c.seeds.execution = c.seeds.execution.wrapping_add(r);
        c
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.output_dir.join("artifacts")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.trainer.kind.slug())
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set: malformed key `{key}`")));
    }
    // anything that is not a TOML literal is taken as a bare string
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{p}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[seeds]
catalog = 1
workload = 2
model = 3
agent = 4
execution = 5
[trainer]
kind = "vanilla"
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.trainer.episodes, 1000);
        assert_eq!(c.env.max_relations, 7);
        assert_eq!(c.reward(), RewardSpec::Cost);
        assert_eq!(c.agent_config(c.seeds.agent).seed, 4);
    }

    #[test]
    fn trainer_kinds_round_trip() {
        for s in [
            "vanilla",
            "naive-latency",
            "lfd",
            "bootstrap",
            "curriculum:pipeline",
            "curriculum:relations",
            "curriculum:hybrid",
        ] {
            let k: TrainerKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("curriculum:zigzag".parse::<TrainerKind>().is_err());
        assert_eq!(TrainerKind::Curriculum(CurriculumKind::Hybrid).slug(), "curriculum-hybrid");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = [
            "trainer.episodes=10".to_string(),
            "trainer.kind=curriculum:pipeline".to_string(),
            "agent.hidden=[8, 4]".to_string(),
            "trainer.timeout={ kind = \"expert_multiple\", value = 20.0 }".to_string(),
        ];
        let c = ExperimentConfig::parse(MINIMAL, &sets).unwrap();
        assert_eq!(c.trainer.episodes, 10);
        assert_eq!(c.trainer.kind, TrainerKind::Curriculum(CurriculumKind::Pipeline));
        assert_eq!(c.agent.hidden, vec![8, 4]);
        assert_eq!(c.trainer.timeout, TimeoutBudget::ExpertMultiple(20.0));
        assert!(matches!(ExperimentConfig::parse(MINIMAL, &["novalue".into()]), Err(CliError::Usage(_))));
    }

    fn field_of(err: CliError) -> String {
        match err {
            CliError::Config { field, .. } => field,
            CliError::Lab(qolab::Error::Config { field, .. }) => field,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let bad = |set: &str| field_of(ExperimentConfig::parse(MINIMAL, &[set.to_string()]).unwrap_err());
        assert_eq!(bad("catalog.relation_count=-3"), "catalog.relation_count");
        assert_eq!(bad("catalog.relation_count=0"), "catalog.relation_count");
        assert_eq!(bad("latency.gamma=0"), "latency.gamma");
        assert_eq!(bad("agent.learning_rate=-1"), "agent.learning_rate");
        assert_eq!(bad("agent.seed=3"), "agent.seed");
        assert_eq!(bad("trainer.bogus=1"), "trainer.bogus");
        assert_eq!(bad("env.max_relations=5"), "env.max_relations");
        let missing = MINIMAL.replace("agent = 4\n", "");
        assert_eq!(field_of(ExperimentConfig::parse(&missing, &[]).unwrap_err()), "seeds");
    }

    #[test]
    fn digests_track_content() {
        let a = ExperimentConfig::parse(MINIMAL, &[]).unwrap();
        let b = ExperimentConfig::parse(MINIMAL, &["trainer.episodes=5".into()]).unwrap();
        assert_eq!(a.digest(), ExperimentConfig::parse(MINIMAL, &[]).unwrap().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.world_digest(), b.world_digest());
        let c = ExperimentConfig::parse(MINIMAL, &["seeds.catalog=9".into()]).unwrap();
        assert_ne!(a.world_digest(), c.world_digest());
        assert_eq!(a.replica(2).seeds.agent, 6);
    }
}
