//! Hard-selection evaluation, selection precision against ground truth and
//! the random/uniform frame-selection baselines.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::{mix_seed, worker_pool};
use crate::cost::{count_flops, CostReport};
use crate::error::{arg_err, Error, Result};
use crate::model::{ForwardOptions, ToyVit};
use crate::select::{keep_count, AnchorGrid};
use crate::synth::{ground_truth_tokens, read_dataset, Dataset, SyntheticSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Uniform,
}

/// `K` of `T` frame indices, ascending. Random draws without replacement;
/// uniform takes `floor(i·T/K)` for `i = 0..K`.
pub fn baseline_select(kind: BaselineKind, t: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 1 || k > t {
        return Err(arg_err!("baseline needs 1 <= K <= T, got K={k}, T={t}"));
    }
    Ok(match kind {
        BaselineKind::Uniform => (0..k).map(|i| i * t / k).collect(),
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample_indices(&mut rng, t, k).into_vec();
            v.sort_unstable();
            v
        }
    })
}

/// Whether the temporal selector of `model` drops any frame.
pub fn temporal_active(model: &ToyVit) -> Result<bool> {
    match model.selection().temporal {
        Some(s) => {
            let t = model.config().temporal_tokens();
            Ok(keep_count(s.ratio, t)? < t)
        }
        None => Ok(false),
    }
}

/// Spatial anchor grid of `model` and whether it drops any token.
fn spatial_grid(model: &ToyVit) -> Result<Option<(AnchorGrid, bool)>> {
    let (Some(spec), Some((p, stride))) = (model.selection().spatial, model.anchor()) else {
        return Ok(None);
    };
    let cfg = model.config();
    let mut side = cfg.grid_side();
    let after_down = cfg.downsample_after.is_some_and(|d| spec.layer > d);
    if after_down {
        side /= 2;
    }
    Ok(Some((
        AnchorGrid::new(side, side, p, stride)?,
        p < side && !after_down,
    )))
}

pub fn spatial_active(model: &ToyVit) -> Result<bool> {
    Ok(spatial_grid(model)?.is_some_and(|(g, _)| g.p() < g.h()))
}

/// Forced frames and anchors, `None` where the model has no such selector.
pub type Overrides = (Option<Vec<usize>>, Option<Vec<usize>>);

/// Baseline choices for one clip: kept frames and one anchor per kept frame.
pub fn baseline_overrides(model: &ToyVit, kind: BaselineKind, seed: u64) -> Result<Overrides> {
    let t = model.config().temporal_tokens();
    let mut kept = t;
    let frames = match model.selection().temporal {
        Some(s) => {
            kept = keep_count(s.ratio, t)?;
            Some(baseline_select(kind, t, kept, seed)?)
        }
        None => None,
    };
    let anchors = match spatial_grid(model)? {
        Some((grid, _)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
            Some(
                (0..kept)
                    .map(|_| match kind {
                        BaselineKind::Random => rng.random_range(0..grid.count()),
                        BaselineKind::Uniform => grid.count() / 2,
                    })
                    .collect(),
            )
        }
        None => None,
    };
    Ok((frames, anchors))
}

/// Fraction of chosen frames (temporal selection) or anchors (spatial
/// selection only) that carry the signal. `None` when nothing is dropped.
pub fn selection_precision(
    model: &ToyVit,
    sample: &SyntheticSample,
    frames: &Option<Vec<usize>>,
    anchors: &Option<Vec<usize>>,
) -> Result<Option<f64>> {
    let gt = ground_truth_tokens(sample, model.config())?;
    if temporal_active(model)? {
        if let Some(f) = frames {
            let hits = f.iter().filter(|x| gt.frames.contains(x)).count();
            return Ok(Some(hits as f64 / f.len() as f64));
        }
    }
    if let (Some((grid, true)), Some(a)) = (spatial_grid(model)?, anchors) {
        let ok = gt.correct_anchors(&grid);
        let hits = a.iter().filter(|x| ok.contains(x)).count();
        return Ok(Some(hits as f64 / a.len() as f64));
    }
    Ok(None)
}

fn temporal_recall(
    model: &ToyVit,
    sample: &SyntheticSample,
    frames: &Option<Vec<usize>>,
) -> Result<Option<f64>> {
    if !temporal_active(model)? {
        return Ok(None);
    }
    let gt = ground_truth_tokens(sample, model.config())?;
    Ok(frames.as_ref().map(|f| {
        let hits = gt.frames.iter().filter(|x| f.contains(x)).count();
        hits as f64 / gt.frames.len() as f64
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean temporal precision, or spatial precision without temporal
    /// selection; absent when nothing is dropped.
    pub sel_precision: Option<f64>,
    pub sel_recall: Option<f64>,
    pub predictions: Vec<usize>,
    pub cost: CostReport,
}

/// Evaluation options. With a baseline, frames and anchors come from
/// [`baseline_overrides`] seeded per sample instead of the scorers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub baseline: Option<BaselineKind>,
    pub seed: u64,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Hard-mode evaluation of an in-memory model.
pub fn evaluate_model(model: &ToyVit, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if data.samples.is_empty() {
        return Err(arg_err!("evaluation set is empty"));
    }
    let c = model.config();
    let s = &data.spec;
    if (s.frames, s.height, s.width, s.channels) != (c.frames, c.height, c.width, c.channels)
        || s.classes != c.classes
    {
        return Err(Error::Version(
            "dataset shape does not match the checkpoint's model".into(),
        ));
    }
    let pool = worker_pool()?;
    type Row = (usize, Option<f64>, Option<f64>);
    let rows: Vec<Result<Row>> = pool.install(|| {
        data.samples
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let mut fo = ForwardOptions::hard();
                if let Some(kind) = opts.baseline {
                    let (f, a) = baseline_overrides(model, kind, mix_seed(opts.seed, i as u64))?;
                    fo.frames_override = f;
                    fo.anchors_override = a;
                }
                let out = model.forward_with(&sample.clip, &fo)?;
                let p = selection_precision(model, sample, &out.frames, &out.anchors)?;
                let r = temporal_recall(model, sample, &out.frames)?;
                Ok((argmax(&out.logits), p, r))
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let correct = rows
        .iter()
        .zip(&data.samples)
        .filter(|((p, _, _), s)| *p == s.label)
        .count();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalReport {
        samples: n,
        accuracy: correct as f64 / n as f64,
        sel_precision: mean(rows.iter().filter_map(|r| r.1).collect()),
        sel_recall: mean(rows.iter().filter_map(|r| r.2).collect()),
        predictions: rows.iter().map(|r| r.0).collect(),
        cost: count_flops(model.config(), model.selection())?,
    })
}

/// Loads a checkpoint and a dataset file and evaluates in hard mode.
pub fn evaluate(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let ds = read_dataset(data)?;
    evaluate_model(&model, &ds, &EvalOptions::default())
}
