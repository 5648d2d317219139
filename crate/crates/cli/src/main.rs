use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qolab::ExpertKind;
use qolab_cli::{cmd_eval, cmd_generate, cmd_report, cmd_train, CliResult, EvalRequest, ExperimentConfig};

#[derive(Parser)]
#[command(name = "qolab", version, about = "Simulated lab for learned join optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override a configuration field, e.g. `--set trainer.episodes=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Expert {
    Dp,
    Greedy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the catalog, workload and latency model.
    Generate(ConfigArgs),
    /// Train an agent on the generated artifacts.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Independent replicas with shifted agent and execution seeds, run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_seeds: usize,
    },
    /// Compare a checkpoint's greedy plans with an expert's.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Workload file to evaluate on instead of the generated one.
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, value_enum)]
        expert: Option<Expert>,
        /// Comma-separated execution seeds for the latency medians.
        #[arg(long, value_delimiter = ',')]
        execution_seeds: Option<Vec<u64>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate metrics files into windowed learning curves.
    Report {
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[arg(long, default_value = "report.csv")]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(args) => {
            let config = args.load()?;
            let manifest = cmd_generate(&config)?;
            for a in &manifest.artifacts {
                println!("{}  {}", a.sha256, config.artifact_dir().join(&a.file).display());
            }
        }
        Command::Train { args, parallel_seeds } => {
            let config = args.load()?;
            for out in cmd_train(&config, parallel_seeds)? {
                let m = &out.manifest;
                println!(
                    "{}: {} episodes, {} timeouts -> {}",
                    m.trainer,
                    m.episodes,
                    m.timeouts,
                    out.run_dir.display()
                );
                for flag in &m.flags {
                    println!("  note: {flag}");
                }
            }
        }
        Command::Eval { args, checkpoint, workload, expert, execution_seeds, output } => {
            let config = args.load()?;
            let request = EvalRequest {
                checkpoint,
                workload,
                expert: expert.map(|e| match e {
                    Expert::Dp => ExpertKind::Dp,
                    Expert::Greedy => ExpertKind::Greedy,
                }),
                execution_seeds,
                output,
            };
            let (report, path) = cmd_eval(&config, &request)?;
            println!(
                "{} queries: median cost ratio {:.4}, median latency ratio {:.4} -> {}",
                report.rows.len(),
                report.median_cost_ratio,
                report.median_latency_ratio,
                path.display()
            );
        }
        Command::Report { metrics, window, output } => {
            let rows = cmd_report(&metrics, window, &output)?;
            println!("{rows} windows -> {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
