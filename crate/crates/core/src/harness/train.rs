//! Training loop: smoothed selection with a linearly decaying σ, AdamW with
//! warmup and cosine decay, per-epoch checkpoints and a JSON-lines metrics
//! stream.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::eval::{baseline_overrides, selection_precision, BaselineKind};
use super::optim::{lr_at, AdamW, AdamWConfig};
use super::{mix_seed, worker_pool};
use crate::config::{ModelConfig, SelectionConfig};
use crate::cost::count_flops;
use crate::error::{arg_err, Error, Result};
use crate::model::{ForwardOptions, ToyVit};
use crate::synth::{read_dataset, Dataset};
use crate::tensor::{Graph, Tensor};
use crate::topk::{PerturbConfig, SelectionMode, SigmaSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_fraction: f32,
    pub sigma0: f32,
    pub mc_samples: usize,
    pub seed: u64,
    /// Record metrics every this many steps (the last step is always logged).
    pub log_every: u64,
    /// Train with baseline frame/anchor choices instead of the scorers.
    pub baseline: Option<BaselineKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.15,
            sigma0: 0.1,
            mc_samples: 100,
            seed: 0,
            log_every: 1,
            baseline: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 || self.log_every == 0 {
            return Err(arg_err!(
                "epochs, batch size, mc samples and log interval must be positive"
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(arg_err!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            ));
        }
        if !self.sigma0.is_finite() || self.sigma0 < 0.0 {
            return Err(arg_err!("sigma0 must be finite and >= 0"));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }

    /// σ schedule reaching zero on the last optimizer step.
    pub fn sigma_schedule(&self, total_steps: u64) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.sigma0, total_steps.saturating_sub(1).max(1))
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub sigma: f32,
    pub flops_estimate: u64,
    pub sel_precision: Option<f64>,
}

/// Written in place of a record when training aborts.
#[derive(Clone, Debug, Serialize)]
struct Diagnostic<'a> {
    step: u64,
    epoch: usize,
    error: &'a str,
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyVit,
    pub final_checkpoint: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

struct SampleResult {
    grads: Vec<Tensor>,
    loss: f64,
    correct: bool,
    precision: Option<f64>,
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

fn metrics_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Trains a fresh model on `data`. With `out`, writes `metrics.jsonl`,
/// `epoch-<n>.ckpt` after every epoch and `final.ckpt`.
pub fn train_on(
    cfg: &ModelConfig,
    selection: &SelectionConfig,
    tc: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.samples.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    let mut model = ToyVit::new(cfg.clone(), *selection, tc.seed)?;
    let flops = count_flops(cfg, selection)?.total;
    let mut opt = AdamW::new(tc.optimizer, model.params())?;
    let per_epoch = tc.steps_per_epoch(data.samples.len());
    let total = per_epoch * tc.epochs as u64;
    let schedule = tc.sigma_schedule(total)?;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((metrics_writer(&p)?, p))
        }
        None => None,
    };
    let pool = worker_pool()?;
    let mut records = Vec::new();
    let mut final_checkpoint = None;
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            tc.seed,
            epoch as u64,
        )));
        for batch in order.chunks(tc.batch_size) {
            let sigma = schedule.at(step);
            let lr = lr_at(tc.optimizer.lr, tc.warmup_fraction, step, total);
            let results: Vec<Result<SampleResult>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &idx)| {
                        let sample = &data.samples[idx];
                        let seed = mix_seed(mix_seed(tc.seed, step), slot as u64);
                        let mut opts = ForwardOptions {
                            mode: SelectionMode::Smoothed,
                            perturb: PerturbConfig::new(sigma, tc.mc_samples, seed)?,
                            ..ForwardOptions::default()
                        };
                        if let Some(kind) = tc.baseline {
                            let (frames, anchors) = baseline_overrides(&model, kind, seed)?;
                            opts.frames_override = frames;
                            opts.anchors_override = anchors;
                        }
                        let mut g = Graph::new();
                        let b = model.params().bind(&mut g);
                        let (loss, trace) =
                            model.loss_graph(&mut g, &b, &sample.clip, sample.label, &opts)?;
                        let loss_value = g.value(loss).data()[0] as f64;
                        let correct = argmax(g.value(trace.logits).data()) == sample.label;
                        let precision =
                            selection_precision(&model, sample, &trace.frames, &trace.anchors)?;
                        let gr = g.backward(loss)?;
                        let mut grads = model.params().zeros_like();
                        b.accumulate(&gr, &mut grads);
                        Ok(SampleResult {
                            grads,
                            loss: loss_value,
                            correct,
                            precision,
                        })
                    })
                    .collect()
            });
            let mut sum = model.params().zeros_like();
            let (mut loss, mut correct, mut prec, mut prec_n) = (0.0, 0usize, 0.0, 0usize);
            for r in results {
                let r = match r {
                    Ok(r) if r.loss.is_finite() => r,
                    Ok(_) | Err(Error::Numeric(_)) => {
                        if let Some((w, p)) = writer.as_mut() {
                            write_line(
                                w,
                                p,
                                &Diagnostic {
                                    step,
                                    epoch,
                                    error: "non-finite loss",
                                },
                            )?;
                        }
                        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
                    }
                    Err(e) => return Err(e),
                };
                for (s, g) in sum.iter_mut().zip(&r.grads) {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                loss += r.loss;
                correct += usize::from(r.correct);
                if let Some(p) = r.precision {
                    prec += p;
                    prec_n += 1;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for s in &mut sum {
                s.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(model.params_mut(), &sum, lr)?;
            if step.is_multiple_of(tc.log_every) || step + 1 == total {
                let rec = MetricsRecord {
                    step,
                    epoch,
                    loss: loss / batch.len() as f64,
                    accuracy: correct as f64 / batch.len() as f64,
                    sigma,
                    flops_estimate: flops,
                    sel_precision: (prec_n > 0).then(|| prec / prec_n as f64),
                };
                if let Some((w, p)) = writer.as_mut() {
                    write_line(w, p, &rec)?;
                }
                records.push(rec);
            }
            step += 1;
        }
        if let Some(dir) = out {
            let path = dir.join(format!("epoch-{epoch}.ckpt"));
            save_checkpoint(&path, &model)?;
            final_checkpoint = Some(path);
        }
    }
    if let Some(dir) = out {
        let path = dir.join("final.ckpt");
        save_checkpoint(&path, &model)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainOutcome {
        model,
        final_checkpoint,
        metrics_path: writer.map(|(_, p)| p),
        records,
    })
}

/// Reads the dataset at `data` and trains into `out`.
pub fn train(
    cfg: &ModelConfig,
    selection: &SelectionConfig,
    tc: &TrainConfig,
    data: &Path,
    out: &Path,
) -> Result<TrainOutcome> {
    let ds = read_dataset(data)?;
    train_on(cfg, selection, tc, &ds, Some(out))
}
