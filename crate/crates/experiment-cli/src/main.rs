//! Command-line driver. One subcommand per step of the experimental
//! procedure plus the oracle suite and the information-plane report. Every
//! run writes a resolved config snapshot, a metrics CSV, and a JSON summary
//! into the output directory. Exit codes: 0 success, 2 config error, 3 data
//! or IO error, 4 numerical failure (including divergence).

use clap::{Parser, Subcommand};
use experiment_cli::config::LayerSpecEntry;
use experiment_cli::reports::{oracle_suite, run_ib_report};
use experiment_cli::{
    emit_metrics, fit_kernel_params, prepare, run_e2e, run_lego, run_monitor,
    run_random_baseline, CliError, ExperimentConfig, Overrides, TrainOutcome,
};
use kernels::KernelSpec;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dgl", version, about = "Layer-wise GP loss experiments")]
struct Cli {
    /// Experiment config (TOML). Required by every subcommand except
    /// oracle-suite.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rebase the init and shuffle seeds; the split seed stays as configured
    /// so the data identity is unchanged.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the dataset directory.
    #[arg(long, global = true)]
    dataset_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Step 1: end-to-end MSE training of the full stack.
    E2e,
    /// Step 2: grid-fit per-layer top-network covariance parameters on a
    /// trained stack (step 1 runs first unless --checkpoint is given).
    FitKernel {
        /// Trained stack to fit against, from a previous run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Steps 1 through 3: train, fit covariances, then retrace the training
    /// run with per-layer DGL monitoring.
    Monitor,
    /// Steps 4 and 5: layer-wise DGL training with freezing, then
    /// classifier-only training.
    Lego {
        /// JSON list of per-layer kernel specs (as written by fit-kernel);
        /// overrides [lego].specs.
        #[arg(long)]
        specs: Option<PathBuf>,
    },
    /// Classifier-only training on frozen random features.
    RandomBaseline,
    /// Run every brute-force cross-check and report one line per identity.
    OracleSuite,
    /// Dump pairwise-distance PDFs and mutual-information estimates for the
    /// train split, optionally through a saved stack's layers.
    IbReport {
        /// Also report each layer of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    if matches!(cli.command, Command::OracleSuite) {
        return Ok(if oracle_suite() {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(4)
        });
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::from_path(config_path)?;
    config.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        dataset_dir: cli.dataset_dir.clone(),
    });
    config.validate()?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.resolved.toml"), config.resolved()?)?;
    let prepared = prepare(&config)?;

    let diverged = match cli.command {
        Command::E2e => {
            let outcome = run_e2e(&config, &prepared)?;
            finish_run(&outcome, &out_dir)?
        }
        Command::FitKernel { checkpoint } => {
            let stack = match checkpoint {
                Some(path) => nn::load_checkpoint(&path)?,
                None => {
                    let outcome = run_e2e(&config, &prepared)?;
                    let diverged = finish_training(&outcome, &out_dir.join("e2e"), &out_dir)?;
                    if diverged {
                        return Ok(ExitCode::from(4));
                    }
                    outcome.best
                }
            };
            let fit = fit_kernel_params(&config, &prepared, &stack)?;
            emit_fit(&fit, &out_dir)?;
            false
        }
        Command::Monitor => {
            let e2e = run_e2e(&config, &prepared)?;
            let diverged = finish_training(&e2e, &out_dir.join("e2e"), &out_dir)?;
            if diverged {
                true
            } else {
                let fit = fit_kernel_params(&config, &prepared, &e2e.best)?;
                emit_fit(&fit, &out_dir)?;
                let mut pinned = config.clone();
                if let Some(lr) = e2e.record.summary.get("lr").and_then(|v| v.as_f64()) {
                    pinned.e2e.lr = lr;
                }
                if let Some(wd) = e2e.record.summary.get("weight_decay").and_then(|v| v.as_f64()) {
                    pinned.e2e.weight_decay = wd;
                }
                let mon = run_monitor(&pinned, &prepared, &fit.specs)?;
                emit_metrics(&mon.record, &out_dir.join("monitor"))?;
                print_outcome(&mon);
                mon.diverged
            }
        }
        Command::Lego { specs } => {
            let specs = resolve_lego_specs(&config, specs.as_deref())?;
            let outcome = run_lego(&config, &prepared, &specs)?;
            finish_run(&outcome, &out_dir)?
        }
        Command::RandomBaseline => {
            let outcome = run_random_baseline(&config, &prepared)?;
            finish_run(&outcome, &out_dir)?
        }
        Command::IbReport { checkpoint } => {
            let files = run_ib_report(&config, &prepared, checkpoint.as_deref(), &out_dir)?;
            println!("ib-report: wrote {} files to {}", files.len(), out_dir.display());
            false
        }
        Command::OracleSuite => unreachable!("handled above"),
    };
    Ok(if diverged {
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    })
}

fn finish_run(outcome: &TrainOutcome, out_dir: &Path) -> Result<bool, CliError> {
    finish_training(outcome, out_dir, out_dir)
}

fn finish_training(
    outcome: &TrainOutcome,
    metrics_dir: &Path,
    ckpt_dir: &Path,
) -> Result<bool, CliError> {
    emit_metrics(&outcome.record, metrics_dir)?;
    std::fs::create_dir_all(ckpt_dir)?;
    nn::save_checkpoint(&outcome.best, &ckpt_dir.join("best.ckpt"))?;
    print_outcome(outcome);
    Ok(outcome.diverged)
}

fn print_outcome(outcome: &TrainOutcome) {
    let summary = &outcome.record.summary;
    let get = |k: &str| summary.get(k).and_then(|v| v.as_f64());
    match (get("test_accuracy"), summary.get("status")) {
        (Some(acc), Some(status)) => println!(
            "{}: status {}, test accuracy {:.4} at epoch {}",
            outcome.record.kind, status, acc, outcome.best_epoch
        ),
        _ => println!("{}: finished", outcome.record.kind),
    }
}

fn emit_fit(fit: &experiment_cli::KernelFit, out_dir: &Path) -> Result<(), CliError> {
    let dir = out_dir.join("fit");
    emit_metrics(&fit.record, &dir)?;
    std::fs::write(
        dir.join("specs.json"),
        serde_json::to_string_pretty(&fit.specs)?,
    )?;
    for (l, spec) in fit.specs.iter().enumerate() {
        println!(
            "fit-kernel: layer {l} depth {} sigma_w2 {} sigma_b2 {}",
            spec.depth, spec.sigma_w2, spec.sigma_b2
        );
    }
    Ok(())
}

fn resolve_lego_specs(
    config: &ExperimentConfig,
    path: Option<&Path>,
) -> Result<Vec<KernelSpec>, CliError> {
    let hidden = config.architecture.hidden_layers;
    let specs: Vec<KernelSpec> = if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)?
    } else if let Some(entries) = &config.lego.specs {
        entries
            .iter()
            .enumerate()
            .map(|(l, e): (usize, &LayerSpecEntry)| KernelSpec {
                depth: hidden - 1 - l,
                activation: config.architecture.activation.kernel_activation(),
                sigma_w2: e.sigma_w2,
                sigma_b2: e.sigma_b2,
                jitter: config.dgl.jitter,
            })
            .collect()
    } else {
        return Err(CliError::Config(
            "lego needs kernel specs: set [lego] specs in the config or pass --specs".into(),
        ));
    };
    if specs.len() != hidden {
        return Err(CliError::Config(format!(
            "{} kernel specs for {hidden} hidden layers",
            specs.len()
        )));
    }
    Ok(specs)
}
