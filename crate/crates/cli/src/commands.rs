use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qolab::agent::{load_checkpoint, Checkpoint, CheckpointMetadata, CHECKPOINT_KIND};
use qolab::catalog::{generate_catalog, generate_workload, load_catalog, load_workload, CATALOG_KIND, WORKLOAD_KIND};
use qolab::costmodel::{build_latency_model, load_latency_model, LATENCY_MODEL_KIND};
use qolab::persist::{digest_hex, load_versioned, save_versioned_with_digest};
use qolab::trainers::bootstrap::{train_bootstrap, BootstrapOptions};
use qolab::trainers::curriculum::train_curriculum;
use qolab::trainers::eval::{evaluate_agent, EvalReport};
use qolab::trainers::lfd::{
    demonstration_samples, expert_agreement, finetune_lfd, pretrain_from_demonstration, record_corpus,
    FinetuneOptions, PretrainOptions,
};
use qolab::trainers::{median, train_naive_latency, train_vanilla_cost, Metrics, World, METRICS_HEADER};
use qolab::{Agent, Catalog, CurriculumSchedule, EnvConfig, ExpertKind, LatencyModel, Workload};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, TrainerKind};
use crate::error::{io_at, CliError, CliResult};

pub const CATALOG_FILE: &str = "catalog.json";
pub const WORKLOAD_FILE: &str = "workload.json";
pub const LATENCY_MODEL_FILE: &str = "latency_model.json";
pub const GENERATE_MANIFEST: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PHASE_DIR: &str = "checkpoints";
pub const RUN_MANIFEST: &str = "run_manifest.json";

const GENERATE_MANIFEST_KIND: &str = "generate_manifest";
const RUN_MANIFEST_KIND: &str = "run_manifest";
const EVAL_SUMMARY_KIND: &str = "eval_summary";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

impl FileDigest {
    fn of(dir: &Path, name: &str) -> CliResult<Self> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        Ok(FileDigest { file: name.to_string(), sha256: digest_hex(&bytes) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub config_digest: String,
    pub world_digest: String,
    pub artifacts: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub trainer: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub episodes: usize,
    pub timeouts: usize,
    pub flags: Vec<String>,
    /// Trainer-specific results such as the bootstrap calibration.
    pub summary: serde_json::Value,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Writes the catalog, workload and latency model under `artifacts/`.
pub fn cmd_generate(config: &ExperimentConfig) -> CliResult<GenerateManifest> {
    let dir = config.artifact_dir();
    create_dir(&dir)?;
    let digest = config.digest();
    let seeds = &config.seeds;
    let catalog = generate_catalog(&config.catalog, seeds.catalog)?;
    let workload = generate_workload(&catalog, &config.workload, seeds.workload)?;
    let model = build_latency_model(&catalog, &config.latency, seeds.model)?;
    save_versioned_with_digest(&dir.join(CATALOG_FILE), CATALOG_KIND, &catalog, Some(&digest))?;
    save_versioned_with_digest(&dir.join(WORKLOAD_FILE), WORKLOAD_KIND, &workload, Some(&digest))?;
    save_versioned_with_digest(&dir.join(LATENCY_MODEL_FILE), LATENCY_MODEL_KIND, &model, Some(&digest))?;
    let manifest = GenerateManifest {
        config_digest: digest.clone(),
        world_digest: config.world_digest(),
        artifacts: [CATALOG_FILE, WORKLOAD_FILE, LATENCY_MODEL_FILE]
            .iter()
            .map(|f| FileDigest::of(&dir, f))
            .collect::<CliResult<_>>()?,
    };
    save_versioned_with_digest(&dir.join(GENERATE_MANIFEST), GENERATE_MANIFEST_KIND, &manifest, Some(&digest))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub catalog: Catalog,
    pub workload: Workload,
    pub latency: LatencyModel,
    pub digests: Vec<FileDigest>,
}

impl Artifacts {
    pub fn world(&self) -> World<'_> {
        World { catalog: &self.catalog, latency: &self.latency, queries: &self.workload.queries }
    }
}

/// Loads generated artifacts and checks they belong to `config`.
pub fn load_artifacts(config: &ExperimentConfig) -> CliResult<Artifacts> {
    let dir = config.artifact_dir();
    let manifest_path = dir.join(GENERATE_MANIFEST);
    let manifest: GenerateManifest = match load_versioned(&manifest_path, GENERATE_MANIFEST_KIND) {
        Err(qolab::Error::NotFound(p)) => return Err(CliError::MissingArtifact(p)),
        other => other?,
    };
    let expected = config.world_digest();
    if manifest.world_digest != expected {
        return Err(CliError::StaleArtifacts { dir, found: manifest.world_digest, expected });
    }
    let missing = |e: qolab::Error| match e {
        qolab::Error::NotFound(p) => CliError::MissingArtifact(p),
        other => other.into(),
    };
    let catalog = load_catalog(&dir.join(CATALOG_FILE)).map_err(missing)?;
    let workload = load_workload(&dir.join(WORKLOAD_FILE)).map_err(missing)?;
    let latency = load_latency_model(&dir.join(LATENCY_MODEL_FILE)).map_err(missing)?;
    let digests = [CATALOG_FILE, WORKLOAD_FILE, LATENCY_MODEL_FILE]
        .iter()
        .map(|f| FileDigest::of(&dir, f))
        .collect::<CliResult<Vec<_>>>()?;
    if digests != manifest.artifacts {
        return Err(CliError::StaleArtifacts {
            dir,
            found: "modified artifact files".into(),
            expected: "the digests in the manifest".into(),
        });
    }
    Ok(Artifacts { catalog, workload, latency, digests })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub phase_checkpoints: Vec<PathBuf>,
    pub manifest: RunManifest,
}

/// Trains `parallel_seeds` replicas; replica `r` shifts the agent and execution
/// seeds by `r` and writes under `runs/<trainer>/replica-<r>/`. A single replica
/// writes directly to `runs/<trainer>/`.
pub fn cmd_train(config: &ExperimentConfig, parallel_seeds: usize) -> CliResult<Vec<TrainOutput>> {
    if parallel_seeds == 0 {
        return Err(CliError::Usage("--parallel-seeds must be at least 1".into()));
    }
    let artifacts = load_artifacts(config)?;
    if parallel_seeds == 1 {
        return Ok(vec![train_one(config, &artifacts, &config.run_dir())?]);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..parallel_seeds)
            .map(|r| {
                let replica = config.replica(r as u64);
                let dir = config.run_dir().join(format!("replica-{r}"));
                let artifacts = &artifacts;
                scope.spawn(move || train_one(&replica, artifacts, &dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    })
}

fn seed_map(config: &ExperimentConfig) -> BTreeMap<String, u64> {
    let s = &config.seeds;
    [
        ("catalog", s.catalog),
        ("workload", s.workload),
        ("model", s.model),
        ("agent", s.agent),
        ("execution", s.execution),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

struct Trained {
    metrics: Metrics,
    agent: Agent,
    env: EnvConfig,
    phases: Vec<(String, EnvConfig, Agent)>,
    summary: serde_json::Value,
}

fn run_trainer(config: &ExperimentConfig, world: World<'_>) -> CliResult<Trained> {
    let t = &config.trainer;
    let env = config.env_config();
    let options = config.train_options(config.seeds.execution);
    let mut agent = Agent::for_env(config.agent_config(config.seeds.agent), &env)?;
    let plain = |metrics, agent, summary| Trained { metrics, agent, env: env.clone(), phases: Vec::new(), summary };
    match t.kind {
        TrainerKind::Vanilla => {
            let m = train_vanilla_cost(world, &mut agent, &env, &options)?;
            Ok(plain(m, agent, json!({})))
        }
        TrainerKind::NaiveLatency => {
            let m = train_naive_latency(world, &mut agent, &env, &options)?;
            Ok(plain(m, agent, json!({})))
        }
        TrainerKind::Lfd => {
            let l = &t.lfd;
            let corpus = record_corpus(world, &env, l.expert, config.seeds.execution)?;
            let pretrain = PretrainOptions {
                passes: l.passes,
                holdout_fraction: l.holdout_fraction,
                seed: config.seeds.agent,
                learning_rate: l.pretrain_learning_rate,
                batch_size: l.pretrain_batch_size,
            };
            let report = pretrain_from_demonstration(world, &env, &mut agent, &corpus, &pretrain)?;
            let agreement = if report.heldout_histories.is_empty() {
                None
            } else {
                Some(expert_agreement(world, &env, &agent, &report.heldout_histories)?)
            };
            let samples = demonstration_samples(world, &env, &report.train_histories)?;
            let defaults = FinetuneOptions::default();
            let finetune = FinetuneOptions {
                train: qolab::trainers::TrainOptions { epsilon: t.epsilon.or(defaults.train.epsilon), ..options },
                slip: l.slip,
                mix_fraction: l.mix_fraction,
            };
            let m = finetune_lfd(world, &mut agent, &env, &samples, &finetune)?;
            let summary = json!({
                "corpus_histories": corpus.len(),
                "pretrain_final_loss": report.final_loss,
                "heldout_losses": report.heldout_losses,
                "heldout_agreement": agreement,
            });
            Ok(plain(m, agent, summary))
        }
        TrainerKind::Bootstrap => {
            let b = &t.bootstrap;
            let opts = BootstrapOptions {
                train: options,
                phase1_cap: b.phase1_cap,
                phase2_episodes: t.episodes,
                convergence_window: b.convergence_window,
                convergence_epsilon: b.convergence_epsilon,
                calibration_window: b.calibration_window,
            };
            let out = train_bootstrap(world, &mut agent, &env, &opts)?;
            let summary = json!({ "calibration": out.calibration, "converged_after": out.converged_after });
            Ok(plain(out.metrics, agent, summary))
        }
        TrainerKind::Curriculum(kind) => {
            let c = &t.curriculum;
            let mut schedule = CurriculumSchedule::generate(kind, config.env.max_relations, c.phase_budget)?;
            schedule.window = c.window;
            schedule.ratio_threshold = c.ratio_threshold;
            // leading phases smaller than every query in the workload would have nothing to train on
            let smallest = world.queries.iter().map(|q| q.len()).min().unwrap_or(0);
            let keep = schedule.phases.iter().position(|p| p.max_relations >= smallest).unwrap_or(0);
            schedule.phases.drain(..keep);
            let out = train_curriculum(world, &mut agent, config.env.max_relations, &schedule, &options)?;
            let phases: Vec<_> = out
                .snapshots
                .into_iter()
                .enumerate()
                .map(|(i, (_, env, a))| (schedule.phase_label(i), env, a))
                .collect();
            let final_env = phases.last().map_or_else(|| env.clone(), |p| p.1.clone());
            let summary = json!({ "phases": schedule.phases, "completed_phases": phases.len() });
            Ok(Trained { metrics: out.metrics, agent, env: final_env, phases, summary })
        }
    }
}

fn train_one(config: &ExperimentConfig, artifacts: &Artifacts, run_dir: &Path) -> CliResult<TrainOutput> {
    create_dir(run_dir)?;
    let phase_dir = run_dir.join(PHASE_DIR);
    if phase_dir.exists() {
        fs::remove_dir_all(&phase_dir).map_err(io_at(&phase_dir))?;
    }
    let trained = run_trainer(config, artifacts.world())?;
    let digest = config.digest();
    let label = config.trainer.kind.to_string();
    let metadata = |label: String| CheckpointMetadata {
        episodes_seen: trained.metrics.len() as u64,
        seeds: seed_map(config),
        label,
    };

    let metrics = run_dir.join(METRICS_FILE);
    trained.metrics.write_csv(&metrics)?;
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    let ck = Checkpoint::new(&trained.agent, &trained.env, metadata(label.clone()));
    save_versioned_with_digest(&checkpoint, CHECKPOINT_KIND, &ck, Some(&digest))?;
    let mut outputs = vec![FileDigest::of(run_dir, METRICS_FILE)?, FileDigest::of(run_dir, CHECKPOINT_FILE)?];

    let mut phase_checkpoints = Vec::new();
    if !trained.phases.is_empty() {
        create_dir(&phase_dir)?;
    }
    for (i, (phase, env, agent)) in trained.phases.iter().enumerate() {
        let name = format!("phase-{}.json", i + 1);
        let path = phase_dir.join(&name);
        let ck = Checkpoint::new(agent, env, metadata(phase.clone()));
        save_versioned_with_digest(&path, CHECKPOINT_KIND, &ck, Some(&digest))?;
        outputs.push(FileDigest::of(run_dir, &format!("{PHASE_DIR}/{name}"))?);
        phase_checkpoints.push(path);
    }

    let manifest = RunManifest {
        trainer: label,
        config_digest: digest.clone(),
        config: config.clone(),
        inputs: artifacts.digests.clone(),
        outputs,
        episodes: trained.metrics.len(),
        timeouts: trained.metrics.timeouts(),
        flags: trained.metrics.flags.clone(),
        summary: trained.summary,
    };
    save_versioned_with_digest(&run_dir.join(RUN_MANIFEST), RUN_MANIFEST_KIND, &manifest, Some(&digest))?;
    Ok(TrainOutput { run_dir: run_dir.to_path_buf(), metrics, checkpoint, phase_checkpoints, manifest })
}

/// Environment a checkpoint of this experiment is evaluated in: the configured
/// one, or every stage for curriculum runs.
pub fn eval_env(config: &ExperimentConfig) -> EnvConfig {
    let mut env = config.env_config();
    if let TrainerKind::Curriculum(_) = config.trainer.kind {
        env.stages = qolab::trainers::curriculum::MAX_STAGES;
    }
    env
}

#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// Defaults to the generated workload.
    pub workload: Option<PathBuf>,
    pub expert: Option<ExpertKind>,
    pub execution_seeds: Option<Vec<u64>>,
    /// Defaults to `eval-<expert>.csv` next to the checkpoint.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: FileDigest,
    pub workload: FileDigest,
    pub expert: ExpertKind,
    pub execution_seeds: Vec<u64>,
    pub queries: usize,
    pub median_cost_ratio: f64,
    pub median_latency_ratio: f64,
}

/// Greedy evaluation of a checkpoint; writes the per-query table and a summary.
pub fn cmd_eval(config: &ExperimentConfig, request: &EvalRequest) -> CliResult<(EvalReport, PathBuf)> {
    let mut artifacts = load_artifacts(config)?;
    if let Some(path) = &request.workload {
        artifacts.workload = match load_workload(path) {
            Err(qolab::Error::NotFound(p)) => return Err(CliError::MissingArtifact(p)),
            other => other?,
        };
        for q in &artifacts.workload.queries {
            q.check(&artifacts.catalog)?;
        }
    }
    let env = eval_env(config);
    let checkpoint = load_checkpoint(&request.checkpoint, &env)?;
    let expert = request.expert.unwrap_or(config.eval.expert);
    let seeds = request.execution_seeds.clone().unwrap_or_else(|| config.eval.execution_seeds.clone());
    let report = evaluate_agent(artifacts.world(), &env, &checkpoint.agent, expert, &seeds)?;

    let output = request.output.clone().unwrap_or_else(|| {
        let dir = request.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("eval-{}.csv", expert_name(expert)))
    });
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&output, report.to_csv()).map_err(io_at(&output))?;
    let file_digest = |path: &Path| -> CliResult<FileDigest> {
        let bytes = fs::read(path).map_err(io_at(path))?;
        Ok(FileDigest { file: path.display().to_string(), sha256: digest_hex(&bytes) })
    };
    let workload_path = request.workload.clone().unwrap_or_else(|| config.artifact_dir().join(WORKLOAD_FILE));
    let summary = EvalSummary {
        checkpoint: file_digest(&request.checkpoint)?,
        workload: file_digest(&workload_path)?,
        expert,
        execution_seeds: seeds,
        queries: report.rows.len(),
        median_cost_ratio: report.median_cost_ratio,
        median_latency_ratio: report.median_latency_ratio,
    };
    let summary_path = output.with_extension("json");
    save_versioned_with_digest(&summary_path, EVAL_SUMMARY_KIND, &summary, Some(&config.digest()))?;
    Ok((report, output))
}

pub fn expert_name(expert: ExpertKind) -> &'static str {
    match expert {
        ExpertKind::Dp => "dp",
        ExpertKind::Greedy => "greedy",
    }
}

pub const REPORT_HEADER: &str = "run,window,first_episode,last_episode,median_cost_ratio,median_latency_ratio,timeouts";

struct MetricsRow {
    episode: u64,
    cost_ratio: f64,
    latency_ratio: f64,
    timeout: bool,
}

fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let bad = |reason: String| CliError::Csv { path: path.to_path_buf(), reason };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => bad(format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let field = |name: &str| -> CliResult<&str> {
            let i = METRICS_HEADER.split(',').position(|h| h == name).expect("known column");
            record.get(i).ok_or_else(|| bad(format!("short row {record:?}")))
        };
        let num = |name: &str| -> CliResult<f64> {
            field(name)?.parse().map_err(|_| bad(format!("column {name} is not numeric in {record:?}")))
        };
        rows.push(MetricsRow {
            episode: num("episode")? as u64,
            cost_ratio: num("cost_ratio")?,
            latency_ratio: num("latency_ratio")?,
            timeout: field("timeout_flag")? == "1",
        });
    }
    Ok(rows)
}

/// Learning curves: per run, consecutive windows of `window` episodes; a
/// trailing partial window is dropped.
pub fn cmd_report(inputs: &[PathBuf], window: usize, output: &Path) -> CliResult<usize> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one metrics file".into()));
    }
    if window == 0 {
        return Err(CliError::Usage("--window must be at least 1".into()));
    }
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let mut count = 0;
    for path in inputs {
        let rows = read_metrics(path)?;
        let run = path.display().to_string().replace(',', "_");
        for (i, chunk) in rows.chunks_exact(window).enumerate() {
            let m = |f: fn(&MetricsRow) -> f64| median(&chunk.iter().map(f).collect::<Vec<_>>()).expect("window is nonempty");
            out.push_str(&format!(
                "{run},{i},{},{},{},{},{}\n",
                chunk[0].episode,
                chunk[chunk.len() - 1].episode,
                m(|r| r.cost_ratio),
                m(|r| r.latency_ratio),
                chunk.iter().filter(|r| r.timeout).count()
            ));
            count += 1;
        }
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(output, out).map_err(io_at(output))?;
    Ok(count)
}
