//! `derl` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use derl::commands::{cmd_analyze, cmd_backtest, cmd_simulate, cmd_train_embed, RunFlags};
use derl::config::RunConfig;
use derl::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "derl", version, about = "Embedding-based RL portfolio backtests")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every configured seed with ones derived from this value.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Freeze the encoder after initial training (no online meta-learning).
    #[arg(long, global = true)]
    no_meta: bool,
    /// Run the agent on raw states without an embedding.
    #[arg(long, global = true)]
    no_embed: bool,
    /// Threads for independent backtest segments.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic panel and volatility index.
    Simulate,
    /// Train the initial state embedding.
    TrainEmbed {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the rolling-window backtest and baselines.
    Backtest,
    /// Factor, regime, characteristic and ablation analysis of a backtest.
    Analyze {
        /// Directory holding the backtest's results.csv.
        #[arg(long)]
        results: PathBuf,
        /// Directory of an ablation run to compare against.
        #[arg(long)]
        ablated: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed_override {
        cfg.override_seeds(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let out = cfg.out.clone();
    match cli.command {
        Command::Simulate => {
            for p in cmd_simulate(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainEmbed { resume } => {
            let p = cmd_train_embed(&cfg, &out, resume.as_deref())?;
            println!("wrote {}", p.display());
        }
        Command::Backtest => {
            let flags = RunFlags {
                no_meta: cli.no_meta,
                no_embed: cli.no_embed,
                jobs: cli.jobs,
            };
            let m = cmd_backtest(&cfg, flags, &out)?;
            for (name, r) in &m.metrics {
                println!("{name:>16}: SR {:.3}  ST {:.3}  mean {:.4}  std {:.4}", r.sharpe, r.sortino, r.mean, r.std);
            }
            for (name, p) in &m.p_values {
                println!("p(SR > {name}) = {p:.4}");
            }
        }
        Command::Analyze { results, ablated } => {
            cmd_analyze(&cfg, &results, ablated.as_deref(), &out)?;
            println!("wrote {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
