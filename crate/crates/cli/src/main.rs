use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffcnn_cli::run::{run_eval, run_report, run_train, ReportKind};
use ffcnn_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ffcnn", version, about = "Train and evaluate ensembles of feedforward-designed CNNs")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the roster and ensemble described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset settings; the config stored in the model is used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a diversity, correlation or size-sweep report.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: ReportKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn optional_config(path: Option<&Path>) -> CliResult<Option<ExperimentConfig>> {
    path.map(ExperimentConfig::load).transpose()
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| CliError::Config("no --out given and no output_dir in config".into()))?;
            let done = run_train(&cfg, &out)?;
            println!("model: {}", done.model_path.display());
            println!("report: {}", done.report_path.display());
            println!("train accuracy: ensemble {:.4}", done.summary.ensemble_accuracy);
        }
        Command::Eval { model, config, out } => {
            let cfg = optional_config(config.as_deref())?;
            let done = run_eval(&model, cfg.as_ref(), &out)?;
            println!(
                "test accuracy: ensemble {:.4}, two-stage {:.4} ({} hard of {})",
                done.ensemble_accuracy,
                done.two_stage_accuracy,
                done.prediction.partition.hard.len(),
                done.samples
            );
        }
        Command::Report { model, kind, config, out } => {
            let cfg = optional_config(config.as_deref())?;
            let path = run_report(&model, cfg.as_ref(), kind, &out)?;
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
