use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptseg::config::{load_config, ExperimentConfig, Mode};
use promptseg::data::{gen_dataset, DatasetSpec};
use promptseg::experiment::{self, RunOptions};
use promptseg::Error;
use tracing::info;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Prompt-conditioned diffusion-feature segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to PNG files.
    GenData {
        /// Config whose `dataset.spec` is rendered; defaults to the built-in spec.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `dataset.path` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the diffusion backbone (mode = "pretrain").
    Pretrain(RunArgs),
    /// Train a segmentation head (train_baseline, train_dg or oracle_train).
    Train(RunArgs),
    /// Test-time scene-prompt tuning (mode = "adapt_ttda").
    Adapt(RunArgs),
    /// Evaluate a saved model (mode = "eval").
    Eval(RunArgs),
    /// Run a config of any mode.
    Run(RunArgs),
    /// Merge completed runs into an ablation table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds to run; overrides `seeds`. Repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Continue an existing run with the same config digest.
    #[arg(long)]
    resume: bool,
    /// Replace an existing run directory.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    load_config(path).map_err(|e| match e {
        Error::Config(_) | Error::Io { .. } => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })
}

fn run_config(args: &RunArgs, allowed: &[Mode], command: &str) -> Result<(), Failure> {
    let cfg = load(&args.config)?;
    if !allowed.is_empty() && !allowed.contains(&cfg.mode) {
        let names: Vec<&str> = allowed.iter().map(|m| m.as_str()).collect();
        return Err(Failure::Config(format!(
            "invalid configuration\n  mode: `{command}` runs modes {}, but the config has mode {}",
            names.join(", "),
            cfg.mode
        )));
    }
    let opts = RunOptions {
        out: args.out.clone(),
        seeds: if args.seed.is_empty() { None } else { Some(args.seed.clone()) },
        resume: args.resume,
        force: args.force,
    };
    let summary = experiment::run(&cfg, &opts)?;
    for m in &summary.metrics {
        println!("{}\t{}\tseed {}\tmIoU {:.2}", m.benchmark, m.setting, m.seed, m.miou);
    }
    println!("{}", summary.run_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out, force } => {
            let (spec, default_out) = match &config {
                Some(p) => {
                    let c = load(p)?;
                    (c.dataset.spec, c.dataset.path)
                }
                None => (DatasetSpec::default(), None),
            };
            let out = out.or(default_out).ok_or_else(|| {
                Failure::Config("invalid configuration\n  dataset.path: required (set it or pass --out)".into())
            })?;
            let records = gen_dataset(&spec, &out, force)?;
            info!(images = records.len(), dir = %out.display(), "dataset written");
            println!("{}", out.display());
            Ok(())
        }
        Command::Pretrain(a) => run_config(&a, &[Mode::Pretrain], "pretrain"),
        Command::Train(a) => run_config(&a, &[Mode::TrainBaseline, Mode::TrainDg, Mode::OracleTrain], "train"),
        Command::Adapt(a) => run_config(&a, &[Mode::AdaptTtda], "adapt"),
        Command::Eval(a) => run_config(&a, &[Mode::Eval], "eval"),
        Command::Run(a) => run_config(&a, &[], "run"),
        Command::Report { runs, out } => {
            let rep = experiment::report(&runs, &out)?;
            print!("{}", rep.markdown);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
