use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use qolab::agent::read_checkpoint;
use qolab::trainers::METRICS_HEADER;
use qolab_cli::commands::{REPORT_HEADER, RUN_MANIFEST};
use qolab_cli::{cmd_eval, cmd_generate, cmd_report, cmd_train, CliError, EvalRequest, ExperimentConfig};
use tempfile::TempDir;

const SMALL: &str = r#"
output_dir = "out"

[seeds]
catalog = 11
workload = 12
model = 13
agent = 14
execution = 15

[catalog]
relation_count = 10

[workload]
query_count = 12
min_relations = 3
max_relations = 5

[env]
max_relations = 5

[agent]
hidden = [16]

[trainer]
kind = "vanilla"
episodes = 10
warmup_episodes = 3

[trainer.curriculum]
phase_budget = 6
window = 3
"#;

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experiment.toml");
    fs::write(&path, SMALL).unwrap();
    (dir, path)
}

fn load(path: &Path, sets: &[&str]) -> ExperimentConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(path, &sets).unwrap()
}

fn qolab(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qolab")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn generate_is_reproducible() {
    let (_dir, path) = setup();
    let config = load(&path, &[]);
    let first = cmd_generate(&config).unwrap();
    assert_eq!(first.artifacts.len(), 3);
    let second = cmd_generate(&config).unwrap();
    assert_eq!(first, second);
    let text = fs::read_to_string(config.artifact_dir().join("catalog.json")).unwrap();
    assert!(text.contains("\"format_version\": 1"));
    assert!(text.contains(&config.digest()));
}

#[test]
fn train_writes_metrics_checkpoint_and_manifest() {
    let (_dir, path) = setup();
    let config = load(&path, &[]);
    cmd_generate(&config).unwrap();
    let out = cmd_train(&config, 1).unwrap().remove(0);
    let metrics = fs::read_to_string(&out.metrics).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 11);
    assert!(out.phase_checkpoints.is_empty());
    let ck = read_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ck.metadata.episodes_seen, 10);
    assert_eq!(ck.metadata.seeds["agent"], 14);
    let manifest = fs::read_to_string(out.run_dir.join(RUN_MANIFEST)).unwrap();
    assert!(manifest.contains("\"trainer\": \"vanilla\""));
    assert!(manifest.contains(&config.digest()));
    assert!(manifest.contains("\"relation_count\": 10"));

    let again = cmd_train(&config, 1).unwrap().remove(0);
    assert_eq!(fs::read(&again.metrics).unwrap(), metrics.as_bytes());
    assert_eq!(again.manifest, out.manifest);
}

#[test]
fn every_trainer_runs() {
    let (_dir, path) = setup();
    cmd_generate(&load(&path, &[])).unwrap();
    for kind in ["naive-latency", "lfd", "bootstrap", "curriculum:relations", "curriculum:hybrid"] {
        let config = load(
            &path,
            &[
                &format!("trainer.kind={kind}"),
                "trainer.bootstrap.phase1_cap=8",
                "trainer.bootstrap.calibration_window=8",
                "trainer.lfd.passes=2",
            ],
        );
        let out = cmd_train(&config, 1).unwrap().remove(0);
        assert!(out.run_dir.ends_with(kind.replace(':', "-")), "{}", out.run_dir.display());
        assert!(!out.manifest.flags.is_empty() || out.manifest.episodes > 0, "{kind}");
    }
}

#[test]
fn pipeline_curriculum_checkpoints_each_stage() {
    let (_dir, path) = setup();
    let config = load(&path, &["trainer.kind=curriculum:pipeline"]);
    cmd_generate(&config).unwrap();
    let out = cmd_train(&config, 1).unwrap().remove(0);
    assert_eq!(out.phase_checkpoints.len(), 4);
    for (i, p) in out.phase_checkpoints.iter().enumerate() {
        let ck = read_checkpoint(p).unwrap();
        assert_eq!(ck.env.stages, i + 1);
    }
    let files = fs::read_dir(out.run_dir.join("checkpoints")).unwrap().count();
    assert_eq!(files, 4);
    assert_eq!(read_checkpoint(&out.checkpoint).unwrap().env.stages, 4);
}

#[test]
fn parallel_replicas_differ_only_in_seeds() {
    let (_dir, path) = setup();
    let config = load(&path, &[]);
    cmd_generate(&config).unwrap();
    let outs = cmd_train(&config, 2).unwrap();
    assert_eq!(outs.len(), 2);
    assert!(outs[0].run_dir.ends_with("replica-0") && outs[1].run_dir.ends_with("replica-1"));
    assert_eq!(outs[1].manifest.config.seeds.agent, 15);
    let single = cmd_train(&config, 1).unwrap().remove(0);
    assert_eq!(fs::read(&outs[0].metrics).unwrap(), fs::read(&single.metrics).unwrap());
    assert_ne!(fs::read(&outs[0].metrics).unwrap(), fs::read(&outs[1].metrics).unwrap());
}

#[test]
fn train_diagnoses_missing_and_stale_artifacts() {
    let (_dir, path) = setup();
    let config = load(&path, &[]);
    assert!(matches!(cmd_train(&config, 1), Err(CliError::MissingArtifact(_))));
    cmd_generate(&config).unwrap();
    let other = load(&path, &["seeds.workload=99"]);
    assert!(matches!(cmd_train(&other, 1), Err(CliError::StaleArtifacts { .. })));
    let workload = config.artifact_dir().join("workload.json");
    let text = fs::read_to_string(&workload).unwrap();
    fs::write(&workload, text.replacen("\"aggregate\": false", "\"aggregate\": true", 1)).unwrap();
    assert!(matches!(cmd_train(&config, 1), Err(CliError::StaleArtifacts { .. })));
}

#[test]
fn eval_untrained_agent_and_fingerprints() {
    let (_dir, path) = setup();
    let config = load(&path, &["trainer.episodes=0", "workload.min_relations=5"]);
    cmd_generate(&config).unwrap();
    let out = cmd_train(&config, 1).unwrap().remove(0);
    let request = EvalRequest { checkpoint: out.checkpoint.clone(), ..EvalRequest::default() };
    let (report, csv) = cmd_eval(&config, &request).unwrap();
    assert_eq!(report.rows.len(), 12);
    assert!(report.median_cost_ratio > 1.0, "{}", report.median_cost_ratio);
    let bytes = fs::read(&csv).unwrap();
    cmd_eval(&config, &request).unwrap();
    assert_eq!(fs::read(&csv).unwrap(), bytes);
    assert!(csv.with_extension("json").exists());

    let wider = load(&path, &["trainer.episodes=0", "workload.min_relations=5", "env.max_relations=6"]);
    let err = cmd_eval(&wider, &request);
    assert!(matches!(err, Err(CliError::Lab(qolab::Error::Fingerprint { .. }))), "{err:?}");
}

#[test]
fn report_windows_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = format!("{METRICS_HEADER}\n");
    for i in 0..10 {
        text.push_str(&format!("{i},vanilla,0,2,1,{},1,1,1,NaN,0.2,{}\n", 1.0 + i as f64, i % 2));
    }
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, &text).unwrap();
    fs::write(&b, &text).unwrap();
    let out = dir.path().join("curves.csv");

    assert_eq!(cmd_report(std::slice::from_ref(&a), 5, &out).unwrap(), 2);
    let lines: Vec<String> = fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert!(lines[1].ends_with(",0,0,4,3,1,2"), "{}", lines[1]);
    assert!(lines[2].ends_with(",1,5,9,8,1,3"), "{}", lines[2]);

    assert_eq!(cmd_report(&[a.clone(), b.clone()], 5, &out).unwrap(), 4);
    let body = fs::read_to_string(&out).unwrap();
    assert_eq!(body.lines().filter(|l| l.starts_with(&a.display().to_string())).count(), 2);
    assert_eq!(body.lines().filter(|l| l.starts_with(&b.display().to_string())).count(), 2);

    assert!(matches!(cmd_report(&[], 5, &out), Err(CliError::Usage(_))));
    let odd = dir.path().join("odd.csv");
    fs::write(&odd, text.replacen("timeout_flag", "timed_out", 1)).unwrap();
    assert!(matches!(cmd_report(&[a, odd], 5, &out), Err(CliError::Csv { .. })));
}

#[test]
fn binary_exit_codes() {
    let (dir, path) = setup();
    let p = path.to_str().unwrap();
    let (code, _, err) = qolab(&["generate", p, "--set", "catalog.relation_count=-3"]);
    assert_eq!(code, 1);
    assert!(err.contains("catalog.relation_count"), "{err}");

    let (code, _, err) = qolab(&["train", p]);
    assert_eq!(code, 2);
    assert!(err.contains("qolab generate"), "{err}");

    let (code, out, _) = qolab(&["generate", p]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 3);
    let (code, out, _) = qolab(&["train", p, "--set", "trainer.episodes=4"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("4 episodes"));

    let metrics = dir.path().join("out/runs/vanilla/metrics.csv");
    let report = dir.path().join("curves.csv");
    let (code, _, _) =
        qolab(&["report", metrics.to_str().unwrap(), "--window", "2", "--output", report.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 3);

    let (code, _, _) = qolab(&["report"]);
    assert_eq!(code, 1);
    let (code, _, _) = qolab(&["frobnicate"]);
    assert_eq!(code, 1);
    let (code, _, _) = qolab(&["--help"]);
    assert_eq!(code, 0);
}
