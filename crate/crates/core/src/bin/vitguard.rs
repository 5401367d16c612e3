use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use vitguard::config::PipelineConfig;
use vitguard::pipeline;
use vitguard::{Error, Result};

/// Adversarial-example detection for vision transformers.
///
/// Exit status: 0 success, 2 configuration, 3 input, 4 state (missing
/// calibration etc.), 5 dimension, 6 evaluation, 7 file format / I/O.
/// Any config key can be overridden with VITGUARD_<SECTION>__<KEY>=value.
#[derive(Debug, Parser)]
#[command(name = "vitguard", version)]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Added to every stage seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sample-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Artifact directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the ViT classifier on the train split.
    TrainVit {
        /// Train the transfer-attack surrogate instead.
        #[arg(long)]
        surrogate: bool,
    },
    /// Train the masked autoencoder on clean training images.
    TrainMae,
    /// Attack the test split with one entry of the attack grid.
    Attack {
        /// Attack name, e.g. fgsm, pgd, apgd, cw, patch_fool, attention_fool,
        /// transfer, adaptive_cw.
        name: String,
    },
    /// Select the detection layer and calibrate thresholds.
    Calibrate,
    /// Run the joint detector on PNG files or adversarial archives.
    Detect {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Calibrated false-positive rate to use.
        #[arg(long, default_value_t = 0.05)]
        fpr: f64,
    },
    /// Run the full attack grid and write the report.
    Evaluate,
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut loaded = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        loaded.config.seeds = loaded.config.seeds.offset(s);
    }
    let out = cli.out.unwrap_or_else(|| loaded.config.out_dir.clone());
    Ok(match cli.command {
        Command::TrainVit { surrogate } => {
            let path = pipeline::train_vit(&loaded, &out, surrogate)?;
            json!({ "checkpoint": path })
        }
        Command::TrainMae => json!({ "checkpoint": pipeline::train_mae(&loaded, &out)? }),
        Command::Attack { name } => {
            serde_json::to_value(pipeline::attack(&loaded, &out, &name)?).unwrap()
        }
        Command::Calibrate => {
            let a = pipeline::calibrate(&loaded, &out)?;
            json!({
                "calibration": pipeline::calibration_path(&out),
                "layer": a.layer,
                "layer_aucs": a.layer_aucs,
                "records": a.records,
            })
        }
        Command::Detect { inputs, fpr } => {
            let records = pipeline::detect(&loaded, &out, &inputs, fpr)?;
            let flagged = records.iter().filter(|r| r.verdict.adversarial).count();
            json!({
                "detections": out.join("detections.jsonl"),
                "inputs": records.len(),
                "flagged": flagged,
            })
        }
        Command::Evaluate => {
            let paths = pipeline::evaluate(&loaded, &out)?;
            let report = vitguard::eval::read_report(&paths.report)?;
            json!({ "report": paths.report, "per_attack": report.per_attack })
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vitguard: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
