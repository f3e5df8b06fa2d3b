//! Command-line front end: dataset generation, training, evaluation,
//! robustness benchmarking, and gradient verification.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "equiseg", version, about = "Balanced multimodal segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (TOML). Flags override file values, which
    /// override built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads; 0 keeps the pool default. Falls back to the
    /// EQUISEG_THREADS environment variable.
    #[arg(long)]
    threads: Option<usize>,

    /// Raw config override, repeatable: --set schedule.steps=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multimodal dataset (train + val splits).
    Gen {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset root (directory containing train/ and val/).
        #[arg(long)]
        data: PathBuf,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// Optimization steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Base learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Numeric profile: train (f32) or test (f64).
        #[arg(long)]
        profile: Option<String>,
        /// Enable or disable the self-guided module.
        #[arg(long, value_parser = parse_on_off)]
        sgm: Option<bool>,
        /// Self-guidance weight λ.
        #[arg(long = "sgm-lambda")]
        lambda: Option<f64>,
        /// λ preset from the sweep: 1, 40, 60 or 80.
        #[arg(long = "lambda-preset")]
        lambda_preset: Option<u32>,
        /// Teacher/student pairing: random or cosine.
        #[arg(long)]
        pairing: Option<String>,
        /// Auxiliary selection: learned or mean.
        #[arg(long = "sq-hub")]
        sq_hub: Option<String>,
        /// Cross-attention on/off (ablation).
        #[arg(long = "cross-attention", value_parser = parse_on_off)]
        cross_attention: Option<bool>,
        /// Residual add of the cross-modal feature on/off (ablation).
        #[arg(long = "residual-add", value_parser = parse_on_off)]
        residual_add: Option<bool>,
        /// Prototype operation on/off (ablation).
        #[arg(long, value_parser = parse_on_off)]
        prototype: Option<bool>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Keep only these modalities (repeatable).
        #[arg(long = "modality")]
        modalities: Vec<String>,
        /// Also write the report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the EMM/RMM/NM robustness protocol on a checkpoint.
    Robust {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Drop probability for EMM(p) and RMM(p).
        #[arg(long)]
        p: Option<f64>,
        /// RMM tile edge length.
        #[arg(long)]
        block: Option<usize>,
        /// Also write the report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only check the aggregate arithmetic against the built-in
        /// reference rows, then exit.
        #[arg(long = "self-test")]
        self_test: bool,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: ConfigArgs,
        /// Seeds per primitive check.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Include the corrupted-rule negative control.
        #[arg(long = "negative-control")]
        negative_control: bool,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on|off, got {other}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
