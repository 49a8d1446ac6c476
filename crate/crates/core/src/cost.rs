//! Analytic FLOPs of the toy transformer under a selection configuration.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs; softmax, normalization and
//! activation cost [`ELEMENTWISE_FLOPS`] per element; additions, pooling,
//! gathers, sorting and random number generation are free.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SelectionConfig, SpatialSpec, TemporalSpec};
use crate::error::{arg_err, Result};
use crate::select::keep_count;

/// Cost per element of softmax, layer norm, min-max normalization and
/// activations.
pub const ELEMENTWISE_FLOPS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Stage {
    Tokenizer,
    Block(usize),
    Downsample(usize),
    Head,
}

/// FLOPs of one attention block by term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTerms {
    pub norm: u64,
    pub qkv: u64,
    pub scores: u64,
    pub softmax: u64,
    pub weighted_values: u64,
    pub projection: u64,
    pub ffn_in: u64,
    pub activation: u64,
    pub ffn_out: u64,
}

impl BlockTerms {
    pub fn total(&self) -> u64 {
        self.norm
            + self.qkv
            + self.scores
            + self.softmax
            + self.weighted_values
            + self.projection
            + self.ffn_in
            + self.activation
            + self.ffn_out
    }

    /// Affine terms, linear in the token count.
    pub fn affine(&self) -> [u64; 4] {
        [self.qkv, self.projection, self.ffn_in, self.ffn_out]
    }

    /// Attention terms, quadratic in the token count.
    pub fn attention(&self) -> [u64; 2] {
        [self.scores, self.weighted_values]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: Stage,
    /// Tokens entering the stage, class token included.
    pub tokens: usize,
    pub flops: u64,
    /// Term breakdown for attention blocks.
    pub terms: Option<BlockTerms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_block: Vec<StageCost>,
    pub scorer_flops: u64,
    pub total: u64,
    pub baseline_total: u64,
    pub savings_fraction: f64,
    /// Extra FLOPs per Monte-Carlo sample of the smoothed Top-K backward
    /// pass during training; not part of `total`.
    pub training_flops_per_mc_sample: u64,
}

impl CostReport {
    pub fn block(&self, i: usize) -> Option<&StageCost> {
        self.per_block.iter().find(|s| s.stage == Stage::Block(i))
    }

    pub fn gflops(&self) -> f64 {
        self.total as f64 * 1e-9
    }
}

fn block_terms(cfg: &ModelConfig, l: usize, c: usize) -> BlockTerms {
    let (l, c, h) = (l as u64, c as u64, cfg.heads as u64);
    let m = c * cfg.mlp_ratio as u64;
    let e = ELEMENTWISE_FLOPS;
    BlockTerms {
        norm: 2 * e * l * c,
        qkv: 2 * l * c * 3 * c,
        scores: 2 * l * l * c,
        softmax: e * h * l * l,
        weighted_values: 2 * l * l * c,
        projection: 2 * l * c * c,
        ffn_in: 2 * l * c * m,
        activation: e * l * m,
        ffn_out: 2 * l * m * c,
    }
}

/// Scorer cost on `l` tokens of width `w`: two `w → w/2` maps with
/// activations, the `w/2 → 1` output map and min-max normalization.
fn scorer_flops(l: usize, w: usize) -> u64 {
    let (l, w) = (l as u64, w as u64);
    let half = w / 2;
    let e = ELEMENTWISE_FLOPS;
    2 * (2 * l * w * half + e * l * half) + 2 * l * half + e * l
}

/// True when a temporal spec keeps every frame.
fn temporal_is_identity(spec: &TemporalSpec, t: usize) -> Result<bool> {
    Ok(keep_count(spec.ratio, t)? == t)
}

/// True when a spatial spec keeps the whole grid.
fn spatial_is_identity(spec: &SpatialSpec, side: usize) -> Result<bool> {
    Ok(spec.resolve(side)?.0 == side)
}

/// FLOPs of one forward pass. Selections that keep every token are
/// counted as absent.
pub fn count_flops(cfg: &ModelConfig, sel: &SelectionConfig) -> Result<CostReport> {
    cfg.validate()?;
    sel.validate_for(cfg)?;
    let (per_block, scorer, training) = walk(cfg, sel)?;
    let total = per_block.iter().map(|s| s.flops).sum::<u64>() + scorer;
    let (baseline, _, _) = walk(cfg, &SelectionConfig::none())?;
    let baseline_total = baseline.iter().map(|s| s.flops).sum::<u64>();
    Ok(CostReport {
        per_block,
        scorer_flops: scorer,
        total,
        baseline_total,
        savings_fraction: 1.0 - total as f64 / baseline_total as f64,
        training_flops_per_mc_sample: training,
    })
}

fn walk(cfg: &ModelConfig, sel: &SelectionConfig) -> Result<(Vec<StageCost>, u64, u64)> {
    let cls = usize::from(cfg.class_token);
    let mut t = cfg.temporal_tokens();
    let mut side = cfg.grid_side();
    let mut c = cfg.embed;
    let mut stages = Vec::with_capacity(cfg.depth + 3);
    let mut scorer = 0;
    let mut training = 0;
    stages.push(StageCost {
        stage: Stage::Tokenizer,
        tokens: t * side * side,
        flops: 2 * (t * side * side * cfg.cube_len() * c) as u64,
        terms: None,
    });
    for i in 0..cfg.depth {
        if let Some(spec) = sel.temporal.filter(|s| s.layer == i) {
            if !temporal_is_identity(&spec, t)? {
                scorer += scorer_flops(t, c);
                // VJP: one multiply-accumulate per score per sample.
                training += 2 * t as u64;
                t = keep_count(spec.ratio, t)?;
            }
        }
        if let Some(spec) = sel.spatial.filter(|s| s.layer == i) {
            if !spatial_is_identity(&spec, side)? {
                let (p, stride) = spec.resolve(side)?;
                let anchors = (side - p) / stride + 1;
                scorer += t as u64 * scorer_flops(side * side, c);
                training += 2 * (t * anchors * anchors) as u64;
                side = p;
            }
        }
        let l = t * side * side + cls;
        let terms = block_terms(cfg, l, c);
        stages.push(StageCost {
            stage: Stage::Block(i),
            tokens: l,
            flops: terms.total(),
            terms: Some(terms),
        });
        if cfg.downsample_after == Some(i) {
            side /= 2;
            let rows = t * side * side + cls;
            stages.push(StageCost {
                stage: Stage::Downsample(i),
                tokens: rows,
                flops: 2 * (rows * c * 2 * c) as u64,
                terms: None,
            });
            c *= 2;
        }
    }
    stages.push(StageCost {
        stage: Stage::Head,
        tokens: 1,
        flops: ELEMENTWISE_FLOPS * c as u64 + 2 * (c * cfg.classes) as u64,
        terms: None,
    });
    Ok((stages, scorer, training))
}

/// Temporal and/or spatial configurations over a ratio grid, temporal
/// ratio outermost.
pub fn ratio_grid(
    temporal_layer: Option<usize>,
    temporal_ratios: &[f32],
    spatial_layer: Option<usize>,
    spatial_ratios: &[f32],
) -> Vec<SelectionConfig> {
    let ts: Vec<Option<TemporalSpec>> = match temporal_layer {
        Some(layer) => temporal_ratios
            .iter()
            .map(|&ratio| Some(TemporalSpec { layer, ratio }))
            .collect(),
        None => vec![None],
    };
    let ss: Vec<Option<SpatialSpec>> = match spatial_layer {
        Some(layer) => spatial_ratios
            .iter()
            .map(|&ratio| {
                Some(SpatialSpec {
                    layer,
                    ratio,
                    anchor: None,
                    stride: None,
                })
            })
            .collect(),
        None => vec![None],
    };
    ts.iter()
        .flat_map(|&temporal| {
            ss.iter()
                .map(move |&spatial| SelectionConfig { temporal, spatial })
        })
        .collect()
}

/// One report per grid point, in grid order.
pub fn sweep_cost(
    cfg: &ModelConfig,
    grid: &[SelectionConfig],
) -> Result<Vec<(SelectionConfig, CostReport)>> {
    if grid.is_empty() {
        return Err(arg_err!("empty ratio grid"));
    }
    grid.iter()
        .map(|s| Ok((*s, count_flops(cfg, s)?)))
        .collect()
}

/// Human-readable multi-line report.
pub fn render_report(report: &CostReport) -> String {
    let mut out = String::new();
    for s in &report.per_block {
        let name = match s.stage {
            Stage::Tokenizer => "tokenizer".to_string(),
            Stage::Block(i) => format!("block {i}"),
            Stage::Downsample(i) => format!("downsample after {i}"),
            Stage::Head => "head".to_string(),
        };
        out.push_str(&format!(
            "{name:<22} tokens {:>5}  flops {:>12}\n",
            s.tokens, s.flops
        ));
    }
    out.push_str(&format!("{:<22} {:>26}\n", "scorers", report.scorer_flops));
    out.push_str(&format!("{:<22} {:>26}\n", "total", report.total));
    out.push_str(&format!(
        "{:<22} {:>26}\n",
        "baseline", report.baseline_total
    ));
    out.push_str(&format!(
        "{:<22} {:>26.4}\n",
        "savings", report.savings_fraction
    ));
    out
}
