use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use tsadv_bench::pipeline::StageSummary;
use tsadv_bench::{gradcheck, CliError, ExperimentConfig, Pipeline, Progress};

#[derive(Parser)]
#[command(name = "tsadv", version, about = "Attack and defend time series models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out` in the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed` in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print one JSON progress object per line on stdout
    #[arg(long, global = true)]
    progress_json: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train one clean checkpoint per model
    Train,
    /// Evaluate every clean model under every attack
    Attack,
    /// Adversarially train every (model, attack) pair
    Defend,
    /// Write report.csv, report.md and report.json
    Report,
    /// train, attack, defend and report
    All,
    /// Check analytic gradients against finite differences
    Gradcheck {
        /// Random points per op kind and architecture
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Gradcheck { seeds } = cli.command {
        return run_gradcheck(seeds);
    }
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out =
        cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs").join(&cfg.dataset.name));
    let pipeline = Pipeline::new(cfg, out, Progress { enabled: cli.progress_json });
    let summary: StageSummary = match cli.command {
        Command::Train => pipeline.train()?,
        Command::Attack => pipeline.attack()?,
        Command::Defend => pipeline.defend()?,
        Command::Report => pipeline.report()?,
        Command::All => pipeline.all()?,
        Command::Gradcheck { .. } => unreachable!(),
    };
    summary.into_result().map(|_| ())
}

fn run_gradcheck(seeds: u64) -> Result<(), CliError> {
    let rows = gradcheck::check_ops(seeds)?.into_iter().chain(gradcheck::check_models(seeds)?);
    let mut summary = StageSummary::default();
    println!("{:<40} {:>6} {:>12} {:>10}", "subject", "seeds", "max rel err", "result");
    for row in rows {
        let ok = row.passed();
        println!(
            "{:<40} {:>6} {:>12.3e} {:>10}",
            row.name,
            row.seeds,
            row.max_rel_error,
            if ok { "pass" } else { "FAIL" }
        );
        summary.total += 1;
        summary.failed += usize::from(!ok);
    }
    summary.into_result().map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            error!("thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
