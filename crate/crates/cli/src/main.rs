//! `drcvr` command line: dataset simulation, training, evaluation, theory
//! verification and hyperparameter sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drcvr::experiment::run::CONFIG_FILE;
use drcvr::experiment::{cmd_eval, cmd_sweep, cmd_synth, cmd_train, cmd_verify, ExperimentConfig};
use drcvr::Error;

#[derive(Debug, Parser)]
#[command(name = "drcvr", version, about = "Doubly robust post-click conversion rate estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate semi-synthetic worlds and write dataset dumps.
    Synth(Common),
    /// Train one model per seed and write checkpoints and logs.
    Train(Common),
    /// Score the checkpoints of a training run and write report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Training run directory; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run the numeric checks of the estimator theory and the hypergradient.
    Verify(Common),
    /// Grid search over config keys.
    Sweep(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Override a config value, e.g. `--set train.l2=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Data root for relative dataset paths.
    #[arg(long, env = drcvr::experiment::config::DATA_ROOT_ENV, hide_env_values = true)]
    data_root: Option<PathBuf>,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(Error::Validation(_) | Error::Parse { .. } | Error::Json(_)) => 1,
            Failure::Runtime(Error::VerificationFailed(_)) => 3,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

fn resolve_config(common: &Common, fallback: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    if let Some(root) = &common.data_root {
        // Read back by `resolve_data_path` on every dataset access.
        std::env::set_var(drcvr::experiment::config::DATA_ROOT_ENV, root);
    }
    let base = match (&common.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(path)) if path.exists() => ExperimentConfig::load(path),
        _ => Ok(ExperimentConfig::default()),
    }
    .map_err(Failure::Config)?;
    let mut cfg = base.with_overrides(&common.overrides).map_err(Failure::Config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
        cfg.verify.seed = seed;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(common) => {
            let cfg = resolve_config(&common, None)?;
            for dir in cmd_synth(&cfg, &common.out).map_err(Failure::Runtime)? {
                println!("{}", dir.display());
            }
        }
        Command::Train(common) => {
            let cfg = resolve_config(&common, None)?;
            let summary = cmd_train(&cfg, &common.out).map_err(Failure::Runtime)?;
            let failed = summary.failures();
            if !failed.is_empty() {
                let seeds: Vec<String> = failed.iter().map(|s| s.seed.to_string()).collect();
                return Err(Failure::Runtime(Error::RunFailed(format!("seed(s) {} failed", seeds.join(", ")))));
            }
            println!("{} seed(s) trained into {}", summary.seeds.len(), common.out.display());
        }
        Command::Eval { common, run } => {
            let run_dir = run.unwrap_or_else(|| common.out.clone());
            let cfg = resolve_config(&common, Some(&run_dir.join(CONFIG_FILE)))?;
            let report = cmd_eval(&cfg, &run_dir, &common.out).map_err(Failure::Runtime)?;
            for (metric, agg) in &report.metrics {
                println!("{metric}\t{:.4}\t{:.4}", agg.mean, agg.std);
            }
        }
        Command::Verify(common) => {
            let cfg = resolve_config(&common, None)?;
            let result = cmd_verify(&cfg, &common.out);
            if let Ok(report) = &result {
                for c in &report.checks {
                    println!("PASS {}: {}", c.name, c.detail);
                }
            }
            result.map_err(Failure::Runtime)?;
        }
        Command::Sweep(common) => {
            let cfg = resolve_config(&common, None)?;
            let report = cmd_sweep(&cfg, &common.out).map_err(Failure::Runtime)?;
            match report.winner {
                Some(w) => {
                    println!("winner: {}", serde_json::to_string(&report.points[w].assignment).unwrap_or_default())
                }
                None => {
                    return Err(Failure::Runtime(Error::RunFailed("no sweep point produced a validation score".into())))
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.error());
            ExitCode::from(failure.exit_code())
        }
    }
}
