//! Experiment CLI for quadratic-linear network landscape studies.
//!
//! Every subcommand reads a JSON experiment config (see `configs/` for
//! examples), runs the matching harness, and writes `results.csv`,
//! `summary.json`, and optionally `traces/*.jsonl` into the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qlnet_core::harness::{self, ExperimentConfig, OracleRunConfig};

#[derive(Parser)]
#[command(name = "qlnet", version, about = "Quadratic-linear network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv / summary.json / traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CI mode: cap the epoch budget at 5000 and early-stop on small
    /// gradients.
    #[arg(long)]
    fast: bool,
    /// Worker-thread limit (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Exit with code 3 when any trial diverged.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Single-layer k-sweep or deep h1-sweep (config selects which).
    Sweep(CommonArgs),
    /// Binary MNIST regression experiment.
    Mnist(CommonArgs),
    /// Construct, verify, and escape the spurious-minimum family.
    Example1(CommonArgs),
    /// Step-size/initialization rescaling equivalence check.
    ScalingCheck(CommonArgs),
    /// Polynomial-layer experiment with the prescribed basis init.
    Poly(CommonArgs),
    /// Solve the convex least-squares certificate for a dataset.
    Oracle(CommonArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn load_config(args: &CommonArgs, expect: &[&str]) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?;
    let tag = match &cfg {
        ExperimentConfig::SingleSweepK(_) => "single-sweep-k",
        ExperimentConfig::DeepSweepH1(_) => "deep-sweep-h1",
        ExperimentConfig::Mnist(_) => "mnist",
        ExperimentConfig::Example1(_) => "example1",
        ExperimentConfig::ScalingCheck(_) => "scaling-check",
        ExperimentConfig::Poly(_) => "poly",
    };
    if !expect.contains(&tag) {
        return Err(format!("config experiment `{tag}` does not match this subcommand"));
    }
    if let Some(seed) = args.seed {
        cfg.set_master_seed(seed);
    }
    if args.fast {
        cfg.set_fast_mode();
    }
    Ok(cfg)
}

fn run_in_pool<F: FnOnce() -> ExitCode + Send>(workers: usize, f: F) -> ExitCode {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            eprintln!("error: cannot build worker pool: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run_experiment(args: &CommonArgs, expect: &[&str]) -> ExitCode {
    let cfg = match load_config(args, expect) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out = args.out.clone();
    let strict = args.strict;
    run_in_pool(args.workers, move || {
        match harness::run_experiment(&cfg, out.as_deref()) {
            Ok(diverged) => {
                if diverged > 0 {
                    eprintln!("{diverged} trial(s) diverged or failed");
                    if strict {
                        return ExitCode::from(EXIT_DIVERGED);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(qlnet_core::Error::Config(msg)) => {
                eprintln!("error: invalid configuration: {msg}");
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        }
    })
}

fn run_oracle(args: &CommonArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cfg: OracleRunConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid config: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match harness::run_oracle(&cfg, args.out.as_deref()) {
        Ok(sol) => {
            println!(
                "loss_star = {:.12e}  residual_norm = {:.6e}  rank_deficient = {}",
                sol.loss_star, sol.residual_norm, sol.rank_deficient
            );
            if args.out.is_none() {
                match sol.to_json() {
                    Ok(json) => println!("{json}"),
                    Err(e) => eprintln!("error: {e}"),
                }
            }
            ExitCode::SUCCESS
        }
        Err(qlnet_core::Error::Config(msg)) => {
            eprintln!("error: invalid configuration: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Sweep(args) => run_experiment(args, &["single-sweep-k", "deep-sweep-h1"]),
        Command::Mnist(args) => run_experiment(args, &["mnist"]),
        Command::Example1(args) => run_experiment(args, &["example1"]),
        Command::ScalingCheck(args) => run_experiment(args, &["scaling-check"]),
        Command::Poly(args) => run_experiment(args, &["poly"]),
        Command::Oracle(args) => run_oracle(args),
    }
}
