//! Front door for the experiment pipeline. Exit codes: 0 success, 2 bad
//! config or input, 3 training diverged to a non-finite loss.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atls::config::{ExperimentConfig, PipelineMode};
use atls::error::{AtlsError, Result};
use atls::experiment;

#[derive(Parser)]
#[command(name = "atls", version, about = "Analog transfer-learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $ATLS_OUT_DIR, then the working directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count this command uses.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FineArgs {
    /// Pretrained checkpoint (overrides run.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run a single mode: digital_tl, analog_tl, digital_scratch, analog_scratch.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Digitally train on the pretrain task and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune in the configured pipeline modes.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fine: FineArgs,
    },
    /// Run the configured sweep grid and summarize it.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fine: FineArgs,
        /// Parallel workers for grid points.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate trace CSVs into a comparison table and plot.
    Report {
        /// Trace CSV files.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Output directory; defaults to $ATLS_OUT_DIR, then the working directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("ATLS_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(common: &Common, pretrain: bool, fine: Option<&FineArgs>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| AtlsError::io(common.config.display().to_string(), e))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        if pretrain {
            cfg.run.epochs_pretrain = epochs;
        } else {
            cfg.run.epochs_finetune = epochs;
        }
    }
    if let Some(fine) = fine {
        if let Some(ckpt) = &fine.checkpoint {
            cfg.run.checkpoint = Some(ckpt.display().to_string());
        }
        if let Some(mode) = &fine.mode {
            let mode: PipelineMode = mode.parse()?;
            cfg.run.modes = vec![mode];
        }
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain { common } => {
            let cfg = load_config(&common, true, None)?;
            let out = experiment::cmd_pretrain(&cfg, &resolve_out_dir(common.out_dir))?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("trace: {}", out.trace.display());
            println!(
                "final error: train {:.2}% test {:.2}%",
                out.final_train_error, out.final_test_error
            );
        }
        Cmd::Finetune { common, fine } => {
            let cfg = load_config(&common, false, Some(&fine))?;
            let trace = experiment::cmd_finetune(&cfg, &resolve_out_dir(common.out_dir))?;
            println!("trace: {}", trace.display());
        }
        Cmd::Sweep { common, fine, jobs } => {
            let cfg = load_config(&common, false, Some(&fine))?;
            let out = experiment::cmd_sweep(&cfg, &resolve_out_dir(common.out_dir), jobs)?;
            println!("trace: {}", out.trace.display());
            println!("summary: {}", out.summary.display());
            println!("plot: {}", out.plot.display());
            println!("completed runs: {}", out.completed_runs);
            if let Some(f) = &out.failures {
                println!(
                    "WARNING: {} run(s) diverged; see {}",
                    out.failed_runs,
                    f.display()
                );
            }
        }
        Cmd::Report { traces, out_dir } => {
            let out = experiment::cmd_report(&traces, &resolve_out_dir(out_dir))?;
            print!("{}", out.table);
            println!("plot: {}", out.plot.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AtlsError::NonFiniteLoss { .. } => ExitCode::from(3),
                AtlsError::Invalid(_) | AtlsError::Io { .. } => ExitCode::from(2),
            }
        }
    }
}
