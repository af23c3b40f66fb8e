use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlmc_cli::config::{self, ConfigError};
use mlmc_cli::{report, run, sweep};
use mlmc_core::MlmcError;

#[derive(Parser)]
#[command(name = "mlmc", version, about = "Multilevel Monte Carlo experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration
    config: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: one per core)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment at the first accuracy in the eps list
    Run(RunArgs),
    /// Run the experiment at every accuracy and fit the cost exponent
    Sweep(RunArgs),
    /// Parse and validate a configuration, then exit
    Validate {
        /// JSON experiment configuration
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// 2 for configuration problems, 3 for honest algorithmic failures the
/// caller may want to budget differently, 1 otherwise.
fn classify(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if let Some(me) = e.downcast_ref::<MlmcError>() {
        return match me {
            MlmcError::BiasUnreachable { .. }
            | MlmcError::NoConvergence { .. }
            | MlmcError::BracketFailure(_)
            | MlmcError::DegenerateObjective { .. } => 3,
            MlmcError::InvalidArgument(_) => 2,
            MlmcError::InvalidState(_) => 1,
        };
    }
    1
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Validate { config } => {
            let cfg = config::load(&config)?;
            println!("ok: {} experiment, {} accuracy target(s)", cfg.experiment.name(), cfg.eps.len());
            Ok(())
        }
        Cmd::Run(args) => run_cmd(args, false),
        Cmd::Sweep(args) => run_cmd(args, true),
    }
}

fn run_cmd(args: RunArgs, all_eps: bool) -> anyhow::Result<()> {
    let mut cfg = config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out);
    }
    let eps_list: Vec<f64> = if all_eps { cfg.eps.clone() } else { vec![cfg.eps[0]] };

    let reports = match args.threads {
        None => run::execute(&cfg, &eps_list)?,
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| anyhow::anyhow!("building a {t}-thread pool: {e}"))?;
            pool.install(|| run::execute(&cfg, &eps_list))?
        }
    };

    for r in &reports {
        println!("{}", r.summary_line());
    }
    if all_eps {
        let summary = sweep::summarize(&reports);
        match summary.cost_slope {
            Some(s) => println!("cost slope: {s:.3} over {} accuracies", summary.rows.len()),
            None => println!(
                "cost slope: not fitted (need >= 3 accuracies spanning a factor >= 4)"
            ),
        }
    }
    if let Some(dir) = &cfg.out_dir {
        report::write_outputs(dir, &reports)?;
        println!("wrote report.json, summary.csv, levels.csv to {}", dir.display());
    }
    Ok(())
}
