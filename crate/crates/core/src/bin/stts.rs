//! Command-line front end: dataset generation, training, evaluation, cost
//! reports and sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use stts::config::{parse_selection, ModelConfig, SelectionConfig};
use stts::cost::{count_flops, ratio_grid, render_report};
use stts::harness::{
    evaluate_model, load_checkpoint, run_sweep, train, BaselineKind, EvalOptions, PointOutcome,
    SweepConfig, TrainConfig,
};
use stts::synth::{generate, read_dataset, write_dataset, GeneratorSpec};
use stts::{Error, Result};

#[derive(Parser)]
#[command(
    name = "stts",
    version,
    about = "Spatial-temporal token selection on synthetic video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Command-line values override the
/// config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON file with optional `generator`, `train` and `sweep` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Selection name, e.g. `tiny-T0_0.5-S2_0.5`.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma0: Option<f32>,
    #[arg(long = "mc-samples")]
    mc_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model and write checkpoints and metrics into `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train with random or uniform selection instead of the scorers.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Evaluate a checkpoint in hard mode.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replace the learned selection by a baseline.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Print the FLOPs report of a selection name.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate over a keep-ratio grid, writing `sweep.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Evaluation dataset.
        #[arg(long = "test-data")]
        test_data: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Baseline {
    Random,
    Uniform,
}

impl From<Baseline> for BaselineKind {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Random => BaselineKind::Random,
            Baseline::Uniform => BaselineKind::Uniform,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepFile {
    backbone: String,
    temporal_layer: Option<usize>,
    temporal_ratios: Vec<f32>,
    spatial_layer: Option<usize>,
    spatial_ratios: Vec<f32>,
    baseline: Option<BaselineKind>,
}

impl Default for SweepFile {
    fn default() -> Self {
        SweepFile {
            backbone: "tiny".into(),
            temporal_layer: Some(0),
            temporal_ratios: vec![0.25, 0.5, 0.75, 1.0],
            spatial_layer: None,
            spatial_ratios: Vec::new(),
            baseline: Some(BaselineKind::Random),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    generator: Option<GeneratorSpec>,
    train: Option<TrainConfig>,
    sweep: Option<SweepFile>,
}

impl Common {
    fn file(&self) -> Result<FileConfig> {
        match &self.config {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
            }
        }
    }

    fn train_config(&self, file: &FileConfig) -> TrainConfig {
        let mut tc = file.train.clone().unwrap_or_default();
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        if let Some(v) = self.sigma0 {
            tc.sigma0 = v;
        }
        if let Some(v) = self.mc_samples {
            tc.mc_samples = v;
        }
        if let Some(v) = self.epochs {
            tc.epochs = v;
        }
        tc
    }

    fn selection(&self) -> Result<(String, ModelConfig, SelectionConfig)> {
        let name = self.name.as_deref().unwrap_or("tiny");
        let parsed = parse_selection(name)?;
        let cfg = ModelConfig::from_backbone(&parsed.backbone)?;
        Ok((parsed.backbone, cfg, parsed.selection))
    }

    fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        v.as_deref()
            .ok_or_else(|| Error::Argument(format!("--{flag} is required")))
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, samples } => {
            let file = common.file()?;
            let (_, cfg, _) = common.selection()?;
            let mut spec = file
                .generator
                .unwrap_or_else(|| GeneratorSpec::for_model(&cfg));
            if let Some(n) = samples {
                spec.samples = n;
            }
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let out = Common::need(&common.out, "out")?;
            write_dataset(out, &generate(&spec)?)?;
            println!("wrote {} samples to {}", spec.samples, out.display());
        }
        Command::Train { common, baseline } => {
            let file = common.file()?;
            let (_, cfg, sel) = common.selection()?;
            let mut tc = common.train_config(&file);
            tc.baseline = baseline.map(Into::into);
            let data = Common::need(&common.data, "data")?;
            let out = Common::need(&common.out, "out")?;
            let run = train(&cfg, &sel, &tc, data, out)?;
            if let Some(last) = run.records.last() {
                println!(
                    "{}",
                    serde_json::to_string(last).map_err(|e| Error::Format(e.to_string()))?
                );
            }
            if let Some(p) = run.final_checkpoint {
                println!("final checkpoint {}", p.display());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let data = read_dataset(Common::need(&common.data, "data")?)?;
            let opts = EvalOptions {
                baseline: baseline.map(Into::into),
                seed: common.seed.unwrap_or(0),
            };
            let mut report = evaluate_model(&model, &data, &opts)?;
            report.predictions.clear();
            println!("{}", to_json(&report)?);
        }
        Command::Flops { common, json } => {
            let (_, cfg, sel) = common.selection()?;
            let report = count_flops(&cfg, &sel)?;
            if json {
                println!("{}", to_json(&report)?);
            } else {
                print!("{}", render_report(&report));
            }
        }
        Command::Sweep { common, test_data } => {
            let file = common.file()?;
            let sf = file.sweep.clone().unwrap_or_default();
            let tc = common.train_config(&file);
            let cfg = ModelConfig::from_backbone(&sf.backbone)?;
            let sc = SweepConfig {
                backbone: sf.backbone.clone(),
                model: cfg,
                grid: ratio_grid(
                    sf.temporal_layer,
                    &sf.temporal_ratios,
                    sf.spatial_layer,
                    &sf.spatial_ratios,
                ),
                train: tc,
                baseline: sf.baseline,
            };
            let train_set = read_dataset(Common::need(&common.data, "data")?)?;
            let test_set = read_dataset(Common::need(&test_data, "test-data")?)?;
            let out = Common::need(&common.out, "out")?;
            let rows = run_sweep(&sc, &train_set, &test_set, Some(out))?;
            for r in &rows {
                match &r.outcome {
                    PointOutcome::Done { accuracy, .. } => {
                        println!("{:<24} {:>12} {accuracy:.4}", r.name, r.flops)
                    }
                    PointOutcome::Failed(e) => {
                        println!("{:<24} {:>12} failed: {e}", r.name, r.flops)
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
