//! Accuracy/cost sweeps over a keep-ratio grid.

use std::fs::{self, File};
use std::path::Path;

use serde::Serialize;

use super::eval::{evaluate_model, spatial_active, temporal_active, BaselineKind, EvalOptions};
use super::mix_seed;
use super::train::{train_on, TrainConfig};
use crate::config::{ModelConfig, SelectionConfig, SelectionName};
use crate::cost::count_flops;
use crate::error::{arg_err, Error, Result};
use crate::model::ToyVit;
use crate::synth::Dataset;

/// Marker written in place of metrics of a grid point that failed.
pub const FAILED: &str = "failed";

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub backbone: String,
    pub model: ModelConfig,
    pub grid: Vec<SelectionConfig>,
    pub train: TrainConfig,
    /// Baseline trained and evaluated next to every non-identity point.
    pub baseline: Option<BaselineKind>,
}

/// Metrics of a grid point, or the error that stopped it.
#[derive(Clone, Debug, PartialEq)]
pub enum PointOutcome {
    Done {
        accuracy: f64,
        sel_precision: Option<f64>,
        baseline_accuracy: Option<f64>,
    },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub keep_ratio_t: Option<f32>,
    pub keep_ratio_s: Option<f32>,
    pub flops: u64,
    pub outcome: PointOutcome,
}

#[derive(Serialize)]
struct CsvRow {
    name: String,
    keep_ratio_t: String,
    keep_ratio_s: String,
    flops: u64,
    accuracy: String,
    sel_precision: String,
    baseline_accuracy: String,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    fn csv(&self) -> CsvRow {
        let (accuracy, sel_precision, baseline_accuracy) = match &self.outcome {
            PointOutcome::Done {
                accuracy,
                sel_precision,
                baseline_accuracy,
            } => (
                accuracy.to_string(),
                opt(*sel_precision),
                opt(*baseline_accuracy),
            ),
            PointOutcome::Failed(_) => (FAILED.into(), FAILED.into(), FAILED.into()),
        };
        CsvRow {
            name: self.name.clone(),
            keep_ratio_t: opt(self.keep_ratio_t),
            keep_ratio_s: opt(self.keep_ratio_s),
            flops: self.flops,
            accuracy,
            sel_precision,
            baseline_accuracy,
        }
    }
}

fn run_point(
    sc: &SweepConfig,
    sel: &SelectionConfig,
    train: &Dataset,
    test: &Dataset,
    dir: Option<&Path>,
) -> Result<PointOutcome> {
    let trained = train_on(&sc.model, sel, &sc.train, train, dir)?;
    let report = evaluate_model(&trained.model, test, &EvalOptions::default())?;
    let probe = ToyVit::new(sc.model.clone(), *sel, sc.train.seed)?;
    let identity = !temporal_active(&probe)? && !spatial_active(&probe)?;
    let baseline_accuracy = match sc.baseline {
        None => None,
        Some(_) if identity => Some(report.accuracy),
        Some(kind) => {
            let tc = TrainConfig {
                baseline: Some(kind),
                ..sc.train.clone()
            };
            let bdir = dir.map(|d| d.join("baseline"));
            let base = train_on(&sc.model, sel, &tc, train, bdir.as_deref())?;
            let opts = EvalOptions {
                baseline: Some(kind),
                seed: mix_seed(sc.train.seed, u64::MAX),
            };
            Some(evaluate_model(&base.model, test, &opts)?.accuracy)
        }
    };
    Ok(PointOutcome::Done {
        accuracy: report.accuracy,
        sel_precision: report.sel_precision,
        baseline_accuracy,
    })
}

/// Trains and evaluates every grid point in order. Invalid configurations
/// are rejected up front; a point failing at run time is recorded and the
/// sweep continues. With `out`, writes `sweep.csv` (one
/// row per point, flushed as it completes) and per-point training output.
pub fn run_sweep(
    sc: &SweepConfig,
    train: &Dataset,
    test: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if sc.grid.is_empty() {
        return Err(arg_err!("empty ratio grid"));
    }
    sc.train.validate()?;
    let costs = sc
        .grid
        .iter()
        .map(|sel| Ok(count_flops(&sc.model, sel)?.total))
        .collect::<Result<Vec<_>>>()?;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("sweep.csv");
            Some((
                csv::Writer::from_writer(File::create(&p).map_err(|e| Error::io(&p, e))?),
                p,
            ))
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(sc.grid.len());
    for (sel, &flops) in sc.grid.iter().zip(&costs) {
        let name = SelectionName {
            backbone: sc.backbone.clone(),
            selection: *sel,
        }
        .to_string();
        let dir = out.map(|d| d.join(&name));
        let outcome = run_point(sc, sel, train, test, dir.as_deref())
            .unwrap_or_else(|e| PointOutcome::Failed(e.to_string()));
        let row = SweepRow {
            name,
            keep_ratio_t: sel.temporal.map(|t| t.ratio),
            keep_ratio_s: sel.spatial.map(|s| s.ratio),
            flops,
            outcome,
        };
        if let Some((w, p)) = writer.as_mut() {
            w.serialize(row.csv())
                .map_err(|e| Error::Format(e.to_string()))?;
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        rows.push(row);
    }
    Ok(rows)
}
