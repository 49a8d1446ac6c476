//! Scorer networks and the temporal and spatial token selection modules.
//!
//! Both selectors score a sequence with the same two-network scorer:
//! a per-token affine map produces local features, their mean is the global
//! feature, and a small MLP over `[local, global]` yields one raw score per
//! token. Raw scores are min-max normalized before Top-K.
//!
//! Temporal selection scores frames (tokens max-pooled over space) and keeps
//! `K = round(ratio·T)` whole frames in their original order. Spatial
//! selection scores the tokens of one frame, max-pools those scores over a
//! grid of overlapping `P×P` anchors, and keeps the single best anchor.
//!
//! In hard mode extraction is an index gather. In smoothed mode the indicator
//! comes from [`soft_topk_forward`](crate::topk::soft_topk_forward) and
//! extraction is the product `Yᵀ·x`, so gradients reach the scorer through
//! the perturbed-maximum VJP.

use rand::Rng;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::params::{affine, linear_init, Binding, ParamId, ParamStore};
use crate::tensor::{Activation, Graph, Reduction, Tensor, Var};
use crate::topk::{
    hard_topk, soft_topk_forward_anchored, soft_topk_vjp_anchored, PerturbConfig, SelectionMode,
    TopKIndicator,
};

/// Guard added to the min-max range.
pub const NORM_EPS: f32 = 1e-6;

/// Spatial-temporal token embeddings of one clip, `T·N` rows of width `C`
/// (frame-major), plus an optional class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    t: usize,
    n: usize,
    tokens: Tensor,
    class_token: Option<Vec<f32>>,
}

impl TokenGrid {
    pub fn new(t: usize, n: usize, tokens: Tensor, class_token: Option<Vec<f32>>) -> Result<Self> {
        if t == 0 || n == 0 {
            return Err(arg_err!("token grid needs T, N >= 1"));
        }
        if tokens.ndim() != 2 || tokens.rows() != t * n {
            return Err(dim_err!(
                "tokens {:?} do not hold T·N = {} rows",
                tokens.shape(),
                t * n
            ));
        }
        if side_of(n).is_none() {
            return Err(arg_err!("spatial token count {n} is not a perfect square"));
        }
        if let Some(c) = &class_token {
            if c.len() != tokens.cols() {
                return Err(dim_err!(
                    "class token width {} vs {}",
                    c.len(),
                    tokens.cols()
                ));
            }
        }
        Ok(TokenGrid {
            t,
            n,
            tokens,
            class_token,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn class_token(&self) -> Option<&[f32]> {
        self.class_token.as_deref()
    }

    /// Tokens of frame `t` as an `N×C` matrix.
    pub fn frame(&self, t: usize) -> Tensor {
        let c = self.c();
        let rows = &self.tokens.data()[t * self.n * c..(t + 1) * self.n * c];
        Tensor::new(vec![self.n, c], rows.to_vec()).expect("frame shape")
    }
}

/// Side of a square token grid, if `n` is a perfect square.
pub fn side_of(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Number of items kept at a keep ratio: `round(ratio·len)`, at least 1.
pub fn keep_count(ratio: f32, len: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(arg_err!("keep ratio must lie in (0, 1], got {ratio}"));
    }
    let k = (ratio as f64 * len as f64).round() as usize;
    if k < 1 {
        return Err(arg_err!("keep ratio {ratio} of {len} keeps nothing"));
    }
    Ok(k.min(len))
}

/// Weights of the two scoring networks.
///
/// `net₁`: affine `H → H/2` plus activation.
/// `net₂`: affine `H → H/2`, activation, affine `H/2 → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub width: usize,
    pub activation: Activation,
    pub local_w: ParamId,
    pub local_b: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ScorerParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(2) {
            return Err(arg_err!("scorer width {width} must be even and positive"));
        }
        let half = width / 2;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(ScorerParams {
            width,
            activation,
            local_w: add("local.w", linear_init(rng, width, half))?,
            local_b: add("local.b", Tensor::zeros(vec![half]))?,
            hidden_w: add("hidden.w", linear_init(rng, width, half))?,
            hidden_b: add("hidden.b", Tensor::zeros(vec![half]))?,
            out_w: add("out.w", linear_init(rng, half, 1))?,
            out_b: add("out.b", Tensor::zeros(vec![1]))?,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.width / 2
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.local_w,
            self.local_b,
            self.hidden_w,
            self.hidden_b,
            self.out_w,
            self.out_b,
        ]
    }
}

/// Scorer outputs recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub local: Var,
    pub global: Var,
    pub raw: Var,
    pub normalized: Var,
}

/// Scorer outputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionScores {
    pub raw: Vec<f32>,
    pub normalized: Vec<f32>,
    pub local_feats: Tensor,
    pub global_feat: Vec<f32>,
}

/// Min-max normalization `(s - min) / (max - min + ε)` as a custom node.
pub fn min_max_normalize(g: &mut Graph, raw: Var) -> Result<Var> {
    let s = g.value(raw).data().to_vec();
    if s.is_empty() {
        return Err(dim_err!("cannot normalize an empty score vector"));
    }
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in s.iter().enumerate() {
        if v < s[lo] {
            lo = i;
        }
        if v > s[hi] {
            hi = i;
        }
    }
    let min = s[lo];
    let range = s[hi] - min + NORM_EPS;
    let out: Vec<f32> = s.iter().map(|v| (v - min) / range).collect();
    let shape = g.shape(raw).to_vec();
    let value = Tensor::new(shape.clone(), out)?;
    g.custom(
        &[raw],
        value,
        Box::new(move |up, ins| {
            let s = ins[0].data();
            let u = up.data();
            let a: f32 = u.iter().sum();
            let b: f32 = u.iter().zip(s).map(|(gi, si)| gi * (si - min)).sum();
            let mut grad: Vec<f32> = u.iter().map(|gi| gi / range).collect();
            grad[lo] += -a / range + b / (range * range);
            grad[hi] += -b / (range * range);
            Ok(vec![Tensor::new(shape.clone(), grad)?])
        }),
    )
}

/// Scores each row of `q` (`L×H`).
pub fn score_tokens_graph(
    g: &mut Graph,
    b: &Binding,
    p: &ScorerParams,
    q: Var,
) -> Result<ScoreVars> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || shape[1] != p.width {
        return Err(dim_err!(
            "scorer of width {} got input {:?}",
            p.width,
            shape
        ));
    }
    let l = shape[0];
    if l == 0 {
        return Err(arg_err!("scorer needs at least one token"));
    }
    let local = affine(g, b, q, p.local_w, p.local_b)?;
    let local = g.activate(local, p.activation)?;
    let global = g.reduce(local, 0, Reduction::Mean)?;
    let global_rows = g.broadcast_rows(global, l)?;
    let feats = g.concat(&[local, global_rows], 1)?;
    let h = affine(g, b, feats, p.hidden_w, p.hidden_b)?;
    let h = g.activate(h, p.activation)?;
    let raw = affine(g, b, h, p.out_w, p.out_b)?;
    let raw = g.reshape(raw, vec![l])?;
    let normalized = min_max_normalize(g, raw)?;
    Ok(ScoreVars {
        local,
        global,
        raw,
        normalized,
    })
}

/// Value-level scoring of an `L×H` matrix.
pub fn score_tokens(q: &Tensor, store: &ParamStore, p: &ScorerParams) -> Result<SelectionScores> {
    if !p.width.is_multiple_of(2) {
        return Err(arg_err!("scorer width {} must be even", p.width));
    }
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let qv = g.constant(q.clone());
    let s = score_tokens_graph(&mut g, &b, p, qv)?;
    Ok(SelectionScores {
        raw: g.value(s.raw).data().to_vec(),
        normalized: g.value(s.normalized).data().to_vec(),
        local_feats: g.value(s.local).clone(),
        global_feat: g.value(s.global).data().to_vec(),
    })
}

/// Records the Top-K indicator of `scores` on the graph. Hard mode yields a
/// constant one-hot matrix; smoothed mode a node whose backward is the
/// perturbed-maximum VJP under the same noise stream. With `base`, smoothed
/// mode reuses the samples drawn around `base` (see
/// [`soft_topk_forward_anchored`]).
pub fn topk_indicator_graph(
    g: &mut Graph,
    scores: Var,
    k: usize,
    mode: SelectionMode,
    cfg: &PerturbConfig,
    base: Option<&[f32]>,
) -> Result<(Var, TopKIndicator)> {
    let s = g.value(scores).data().to_vec();
    let len = s.len();
    match mode {
        SelectionMode::Hard => {
            let ind = hard_topk(&s, k)?;
            let v = g.constant(ind.to_tensor());
            Ok((v, ind))
        }
        SelectionMode::Smoothed => {
            let base = base.unwrap_or(&s).to_vec();
            let ind = soft_topk_forward_anchored(&s, &base, k, cfg)?;
            let cfg = *cfg;
            let in_shape = g.shape(scores).to_vec();
            let v = g.custom(
                &[scores],
                ind.to_tensor(),
                Box::new(move |up, _| {
                    let grad = soft_topk_vjp_anchored(&s, &base, k, &cfg, up.data())?;
                    Ok(vec![Tensor::new(in_shape.clone(), grad)?])
                }),
            )?;
            debug_assert_eq!(ind.len(), len);
            Ok((v, ind))
        }
    }
}

/// Extracts `Yᵀ·x` from an `L×D` matrix. Hard indicators gather rows
/// directly, which equals the one-hot product exactly.
pub fn extract(g: &mut Graph, x: Var, y: Var, indicator: &TopKIndicator) -> Result<Var> {
    match indicator.indices() {
        Some(idx) => g.select(x, 0, idx),
        None => {
            let yt = g.transpose(y)?;
            g.matmul(yt, x)
        }
    }
}

/// Result of a temporal selection on the graph.
#[derive(Clone, Debug)]
pub struct TemporalSelection {
    /// `K·N × C` selected tokens, frame-major.
    pub tokens: Var,
    pub k: usize,
    pub indicator: TopKIndicator,
    /// Selected frame indices (hard mode; for smoothed mode the frames with
    /// the largest mass per column).
    pub frames: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Keeps `round(ratio·T)` of the `T` frames in `tokens` (`T·N × C`).
#[allow(clippy::too_many_arguments)]
pub fn temporal_select_graph(
    g: &mut Graph,
    b: &Binding,
    p: &ScorerParams,
    tokens: Var,
    t: usize,
    n: usize,
    ratio: f32,
    mode: SelectionMode,
    cfg: &PerturbConfig,
    base: Option<&[f32]>,
) -> Result<TemporalSelection> {
    let k = keep_count(ratio, t)?;
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != t * n {
        return Err(dim_err!(
            "temporal selection of T={t}, N={n} got tokens {:?}",
            shape
        ));
    }
    let c = shape[1];
    let cube = g.reshape(tokens, vec![t, n, c])?;
    let frames_rep = g.reduce(cube, 1, Reduction::Max)?;
    let scores = score_tokens_graph(g, b, p, frames_rep)?;
    let (y, indicator) = topk_indicator_graph(g, scores.normalized, k, mode, cfg, base)?;
    let flat = g.reshape(tokens, vec![t, n * c])?;
    let picked = extract(g, flat, y, &indicator)?;
    let out = g.reshape(picked, vec![k * n, c])?;
    let frames = dominant_rows(&indicator);
    Ok(TemporalSelection {
        tokens: out,
        k,
        indicator,
        frames,
        scores: g.value(scores.normalized).data().to_vec(),
    })
}

/// For each column, the row with the largest value (first on ties).
fn dominant_rows(ind: &TopKIndicator) -> Vec<usize> {
    if let Some(idx) = ind.indices() {
        return idx.to_vec();
    }
    (0..ind.k())
        .map(|c| {
            let mut best = 0;
            for r in 1..ind.len() {
                if ind.at(r, c) > ind.at(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Value-level temporal selection. The class token passes through untouched.
pub fn temporal_select(
    grid: &TokenGrid,
    ratio: f32,
    store: &ParamStore,
    p: &ScorerParams,
    mode: SelectionMode,
    cfg: &PerturbConfig,
) -> Result<(TokenGrid, TopKIndicator)> {
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let tokens = g.constant(grid.tokens.clone());
    let sel = temporal_select_graph(
        &mut g, &b, p, tokens, grid.t, grid.n, ratio, mode, cfg, None,
    )?;
    let out = TokenGrid::new(
        sel.k,
        grid.n,
        g.value(sel.tokens).clone(),
        grid.class_token.clone(),
    )?;
    Ok((out, sel.indicator))
}

/// Overlapping `P×P` windows over an `H×W` token grid with stride `s`,
/// enumerated row-major by top-left corner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorGrid {
    h: usize,
    w: usize,
    p: usize,
    stride: usize,
    corners: Vec<(usize, usize)>,
    anchors: Vec<Vec<usize>>,
}

impl AnchorGrid {
    pub fn new(h: usize, w: usize, p: usize, stride: usize) -> Result<Self> {
        if p < 1 || p > h || p > w {
            return Err(arg_err!("anchor side {p} must lie in [1, min({h}, {w})]"));
        }
        if stride < 1 {
            return Err(arg_err!("anchor stride must be >= 1"));
        }
        if !(h - p).is_multiple_of(stride) || !(w - p).is_multiple_of(stride) {
            return Err(arg_err!(
                "stride {stride} does not divide H-P = {} and W-P = {}",
                h - p,
                w - p
            ));
        }
        let rows = (h - p) / stride + 1;
        let cols = (w - p) / stride + 1;
        let mut corners = Vec::with_capacity(rows * cols);
        let mut anchors = Vec::with_capacity(rows * cols);
        for ar in 0..rows {
            for ac in 0..cols {
                let (r0, c0) = (ar * stride, ac * stride);
                corners.push((r0, c0));
                let mut idx = Vec::with_capacity(p * p);
                for r in r0..r0 + p {
                    for c in c0..c0 + p {
                        idx.push(r * w + c);
                    }
                }
                anchors.push(idx);
            }
        }
        Ok(AnchorGrid {
            h,
            w,
            p,
            stride,
            corners,
            anchors,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn count(&self) -> usize {
        self.anchors.len()
    }

    pub fn corners(&self) -> &[(usize, usize)] {
        &self.corners
    }

    /// Flat token indices of anchor `g`, row-major within the block.
    pub fn anchor(&self, g: usize) -> &[usize] {
        &self.anchors[g]
    }

    pub fn anchors(&self) -> &[Vec<usize>] {
        &self.anchors
    }

    fn flat_indices(&self) -> Vec<usize> {
        self.anchors.iter().flatten().copied().collect()
    }
}

pub fn build_anchor_grid(h: usize, w: usize, p: usize, s: usize) -> Result<AnchorGrid> {
    AnchorGrid::new(h, w, p, s)
}

/// Result of a spatial selection on one frame.
#[derive(Clone, Debug)]
pub struct SpatialSelection {
    /// `P²×C` tokens of the chosen anchor.
    pub tokens: Var,
    pub indicator: TopKIndicator,
    pub anchor: usize,
    pub anchor_scores: Vec<f32>,
}

/// Picks the best anchor of one frame (`N×C` tokens, class token excluded).
#[allow(clippy::too_many_arguments)]
pub fn spatial_select_graph(
    g: &mut Graph,
    b: &Binding,
    p: &ScorerParams,
    frame: Var,
    grid: &AnchorGrid,
    mode: SelectionMode,
    cfg: &PerturbConfig,
    base: Option<&[f32]>,
) -> Result<SpatialSelection> {
    let shape = g.shape(frame).to_vec();
    let n = grid.h * grid.w;
    if shape.len() != 2 || shape[0] != n {
        return Err(dim_err!(
            "anchor grid over {}x{} tokens got frame {:?}",
            grid.h,
            grid.w,
            shape
        ));
    }
    let c = shape[1];
    let count = grid.count();
    let pp = grid.p * grid.p;
    let scores = score_tokens_graph(g, b, p, frame)?;
    let flat = grid.flat_indices();
    let per_anchor = g.select(scores.normalized, 0, &flat)?;
    let per_anchor = g.reshape(per_anchor, vec![count, pp])?;
    let anchor_scores = g.reduce(per_anchor, 1, Reduction::Max)?;
    let (y, indicator) = topk_indicator_graph(g, anchor_scores, 1, mode, cfg, base)?;
    let (tokens, anchor) = match indicator.indices() {
        Some(idx) => (g.select(frame, 0, grid.anchor(idx[0]))?, idx[0]),
        None => {
            let windows = g.select(frame, 0, &flat)?;
            let windows = g.reshape(windows, vec![count, pp * c])?;
            let mixed = extract(g, windows, y, &indicator)?;
            (g.reshape(mixed, vec![pp, c])?, dominant_rows(&indicator)[0])
        }
    };
    Ok(SpatialSelection {
        tokens,
        indicator,
        anchor,
        anchor_scores: g.value(anchor_scores).data().to_vec(),
    })
}

/// Value-level spatial selection. Returns the chosen anchor's tokens
/// (row-major) with the class token, when given, prepended.
pub fn spatial_select(
    frame: &Tensor,
    class_token: Option<&[f32]>,
    grid: &AnchorGrid,
    store: &ParamStore,
    p: &ScorerParams,
    mode: SelectionMode,
    cfg: &PerturbConfig,
) -> Result<(Tensor, SpatialSelection)> {
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let f = g.constant(frame.clone());
    let sel = spatial_select_graph(&mut g, &b, p, f, grid, mode, cfg, None)?;
    let mut out = g.value(sel.tokens).clone();
    if let Some(cls) = class_token {
        if cls.len() != out.cols() {
            return Err(Error::Dimension(format!(
                "class token width {} vs {}",
                cls.len(),
                out.cols()
            )));
        }
        let mut data = cls.to_vec();
        data.extend_from_slice(out.data());
        out = Tensor::new(vec![out.rows() + 1, out.cols()], data)?;
    }
    Ok((out, sel))
}
