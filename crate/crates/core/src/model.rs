//! Toy video transformer with configurable token selection insertions.
//!
//! A clip is cut into `cube_t × cube_p × cube_p` tubes, each projected to a
//! token of width `C`, plus learned positional encodings. Pre-norm attention
//! blocks follow. Before block `L_t` the temporal selector keeps whole frames;
//! before block `L_s` the spatial selector keeps one anchor per frame. An
//! optional stage downsample halves the grid side and doubles the width.
//! The head reads the final class token (or the token mean when the model
//! has none).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SelectionConfig};
use crate::error::{arg_err, dim_err, Result};
use crate::params::{affine, linear_init, normal_init, Binding, ParamId, ParamStore};
use crate::select::{
    keep_count, side_of, spatial_select_graph, temporal_select_graph, AnchorGrid, ScorerParams,
    TokenGrid,
};
use crate::tensor::{Graph, Reduction, Tensor, Var};
use crate::topk::{PerturbConfig, SelectionMode, TopKIndicator};

/// Raw clip, `D × H × W × channels` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(arg_err!("clip dimensions must be positive"));
        }
        if pixels.len() != frames * height * width * channels {
            return Err(dim_err!(
                "{} pixels for a {frames}x{height}x{width}x{channels} clip",
                pixels.len()
            ));
        }
        Ok(VideoClip {
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        VideoClip {
            frames,
            height,
            width,
            channels,
            pixels: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn index(&self, d: usize, y: usize, x: usize, c: usize) -> usize {
        ((d * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, d: usize, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[self.index(d, y, x, c)]
    }

    pub fn set(&mut self, d: usize, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(d, y, x, c);
        self.pixels[i] = v;
    }

    /// Sets every pixel of frame `d` to zero.
    pub fn clear_frame(&mut self, d: usize) {
        let len = self.height * self.width * self.channels;
        self.pixels[d * len..(d + 1) * len].fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub width: usize,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Per-head attention of already projected `q`, `k`, `v` (`L×C` each).
/// Returns the concatenated head outputs and each head's weight matrix.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(dim_err!(
            "attention operands {:?}, {:?}, {:?}",
            shape,
            g.shape(k),
            g.shape(v)
        ));
    }
    let c = shape[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(dim_err!("width {c} not divisible into {heads} heads"));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols: Vec<usize> = (h * d..(h + 1) * d).collect();
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.select(q, 1, &cols)?,
                g.select(k, 1, &cols)?,
                g.select(v, 1, &cols)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax_rows(logits)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok((out, weights))
}

/// 2×2 average pooling of each frame of a frame-major `T·N × C` grid.
pub fn pool_grid_graph(g: &mut Graph, tokens: Var, t: usize, n: usize) -> Result<Var> {
    let side = side_of(n).ok_or_else(|| arg_err!("spatial token count {n} is not square"))?;
    if side % 2 != 0 {
        return Err(arg_err!(
            "grid side {side} is odd; 2x2 pooling needs an even side"
        ));
    }
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != t * n {
        return Err(dim_err!("pooling T={t}, N={n} got tokens {:?}", shape));
    }
    let c = shape[1];
    let half = side / 2;
    let mut idx = Vec::with_capacity(t * n);
    for f in 0..t {
        for r in 0..half {
            for col in 0..half {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    idx.push(f * n + (2 * r + dr) * side + 2 * col + dc);
                }
            }
        }
    }
    let windows = g.select(tokens, 0, &idx)?;
    let windows = g.reshape(windows, vec![t * n / 4, 4, c])?;
    g.reduce(windows, 1, Reduction::Mean)
}

/// Value-level 2×2 pooling of a `T·N × C` grid.
pub fn pool_grid(tokens: &Tensor, t: usize, n: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let y = pool_grid_graph(&mut g, x, t, n)?;
    Ok(g.value(y).clone())
}

/// Smoothing inputs for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub mode: SelectionMode,
    /// Seed and σ of the perturbations; every selection site derives its own
    /// stream from this seed.
    pub perturb: PerturbConfig,
    /// Per-site base scores for the anchored estimator, as recorded in
    /// [`ForwardTrace::site_scores`] of an earlier pass.
    pub base_scores: Option<Vec<Vec<f32>>>,
    /// Temporal tokens to keep instead of the scorer's choice.
    pub frames_override: Option<Vec<usize>>,
    /// Anchor per kept frame to use instead of the scorer's choice.
    pub anchors_override: Option<Vec<usize>>,
}

impl ForwardOptions {
    pub fn hard() -> Self {
        ForwardOptions::default()
    }

    pub fn smoothed(perturb: PerturbConfig) -> Self {
        ForwardOptions {
            mode: SelectionMode::Smoothed,
            perturb,
            ..Self::default()
        }
    }
}

/// What a forward pass recorded besides its logits.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Kept temporal token indices (dominant rows in smoothed mode).
    pub frames: Option<Vec<usize>>,
    pub temporal_indicator: Option<TopKIndicator>,
    /// Chosen anchor per kept frame.
    pub anchors: Option<Vec<usize>>,
    /// Scores fed to Top-K at each site: temporal first, then one entry per
    /// frame for the spatial selector.
    pub site_scores: Vec<Vec<f32>>,
}

/// Result of a value-level forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub frames: Option<Vec<usize>>,
    pub anchors: Option<Vec<usize>>,
}

fn site_seed(seed: u64, site: usize) -> u64 {
    let mut z = seed ^ (site as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The toy transformer: configuration, selection insertions and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVit {
    cfg: ModelConfig,
    selection: SelectionConfig,
    anchor: Option<(usize, usize)>,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    cls: Option<ParamId>,
    blocks: Vec<BlockParams>,
    down: Option<(ParamId, ParamId)>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    temporal_scorer: Option<ScorerParams>,
    spatial_scorer: Option<ScorerParams>,
}

impl ToyVit {
    /// Fresh weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, selection: SelectionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let anchor = selection.validate_for(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.embed;
        let tokens = cfg.temporal_tokens() * cfg.spatial_tokens();
        let embed_w = store.add("embed.w", linear_init(&mut rng, cfg.cube_len(), c))?;
        let embed_b = store.add("embed.b", Tensor::zeros(vec![c]))?;
        let pos = store.add("pos", normal_init(&mut rng, &[tokens, c], 0.02))?;
        let cls = if cfg.class_token {
            Some(store.add("cls", normal_init(&mut rng, &[1, c], 0.02))?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut down = None;
        let mut temporal_scorer = None;
        let mut spatial_scorer = None;
        for i in 0..cfg.depth {
            let w = cfg.width_at(i);
            if selection.temporal.is_some_and(|t| t.layer == i) {
                temporal_scorer = Some(ScorerParams::new(
                    &mut store,
                    "select.t",
                    w,
                    cfg.activation,
                    &mut rng,
                )?);
            }
            if selection.spatial.is_some_and(|s| s.layer == i) {
                spatial_scorer = Some(ScorerParams::new(
                    &mut store,
                    "select.s",
                    w,
                    cfg.activation,
                    &mut rng,
                )?);
            }
            let hidden = w * cfg.mlp_ratio;
            let p = format!("blocks.{i}");
            let mut add = |name: &str, t: Tensor| store.add(format!("{p}.{name}"), t);
            blocks.push(BlockParams {
                width: w,
                ln1_g: add("ln1.g", Tensor::full(vec![w], 1.0))?,
                ln1_b: add("ln1.b", Tensor::zeros(vec![w]))?,
                qkv_w: add("qkv.w", linear_init(&mut rng, w, 3 * w))?,
                qkv_b: add("qkv.b", Tensor::zeros(vec![3 * w]))?,
                proj_w: add("proj.w", linear_init(&mut rng, w, w))?,
                proj_b: add("proj.b", Tensor::zeros(vec![w]))?,
                ln2_g: add("ln2.g", Tensor::full(vec![w], 1.0))?,
                ln2_b: add("ln2.b", Tensor::zeros(vec![w]))?,
                fc1_w: add("fc1.w", linear_init(&mut rng, w, hidden))?,
                fc1_b: add("fc1.b", Tensor::zeros(vec![hidden]))?,
                fc2_w: add("fc2.w", linear_init(&mut rng, hidden, w))?,
                fc2_b: add("fc2.b", Tensor::zeros(vec![w]))?,
            });
            if cfg.downsample_after == Some(i) {
                down = Some((
                    store.add("down.w", linear_init(&mut rng, w, 2 * w))?,
                    store.add("down.b", Tensor::zeros(vec![2 * w]))?,
                ));
            }
        }
        let out_w = cfg.width_at(cfg.depth);
        let norm_g = store.add("norm.g", Tensor::full(vec![out_w], 1.0))?;
        let norm_b = store.add("norm.b", Tensor::zeros(vec![out_w]))?;
        // A zero head makes an untrained model predict the same class for
        // every clip, so its accuracy sits at chance.
        let head_w = store.add("head.w", Tensor::zeros(vec![out_w, cfg.classes]))?;
        let head_b = store.add("head.b", Tensor::zeros(vec![cfg.classes]))?;
        Ok(ToyVit {
            cfg,
            selection,
            anchor,
            store,
            embed_w,
            embed_b,
            pos,
            cls,
            blocks,
            down,
            norm_g,
            norm_b,
            head_w,
            head_b,
            temporal_scorer,
            spatial_scorer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn selection(&self) -> &SelectionConfig {
        &self.selection
    }

    /// Resolved anchor side and stride of the spatial selector.
    pub fn anchor(&self) -> Option<(usize, usize)> {
        self.anchor
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn embedding(&self) -> (ParamId, ParamId, ParamId) {
        (self.embed_w, self.embed_b, self.pos)
    }

    pub fn temporal_scorer(&self) -> Option<&ScorerParams> {
        self.temporal_scorer.as_ref()
    }

    pub fn spatial_scorer(&self) -> Option<&ScorerParams> {
        self.spatial_scorer.as_ref()
    }

    /// Replaces every weight with the tensors of `store`, which must hold
    /// the same names and shapes in the same order.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        let same = store.len() == self.store.len()
            && store
                .iter()
                .zip(self.store.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(crate::Error::Version(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        self.store = store;
        Ok(())
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let c = &self.cfg;
        if !clip.frames.is_multiple_of(c.cube_t)
            || !clip.height.is_multiple_of(c.cube_p)
            || !clip.width.is_multiple_of(c.cube_p)
        {
            return Err(arg_err!(
                "clip {}x{}x{} not divisible by cubes {}x{}x{}",
                clip.frames,
                clip.height,
                clip.width,
                c.cube_t,
                c.cube_p,
                c.cube_p
            ));
        }
        if (clip.frames, clip.height, clip.width, clip.channels)
            != (c.frames, c.height, c.width, c.channels)
        {
            return Err(dim_err!(
                "clip {}x{}x{}x{} does not match the model input {}x{}x{}x{}",
                clip.frames,
                clip.height,
                clip.width,
                clip.channels,
                c.frames,
                c.height,
                c.width,
                c.channels
            ));
        }
        Ok(())
    }

    /// Flattened cubes, one row per token in frame-major order. Each row
    /// lists `(dt, dy, dx, channel)` with the channel fastest.
    pub fn patchify(&self, clip: &VideoClip) -> Result<Tensor> {
        self.check_clip(clip)?;
        let c = &self.cfg;
        let (t, side) = (c.temporal_tokens(), c.grid_side());
        let len = c.cube_len();
        let mut data = Vec::with_capacity(t * side * side * len);
        for ft in 0..t {
            for py in 0..side {
                for px in 0..side {
                    for dt in 0..c.cube_t {
                        for dy in 0..c.cube_p {
                            let d = ft * c.cube_t + dt;
                            let y = py * c.cube_p + dy;
                            let start = clip.index(d, y, px * c.cube_p, 0);
                            data.extend_from_slice(
                                &clip.pixels[start..start + c.cube_p * c.channels],
                            );
                        }
                    }
                }
            }
        }
        Tensor::new(vec![t * side * side, len], data)
    }

    fn tokenize_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        clip: &VideoClip,
    ) -> Result<(Var, Option<Var>)> {
        let patches = g.constant(self.patchify(clip)?);
        let x = affine(g, b, patches, self.embed_w, self.embed_b)?;
        let x = g.add(x, b.var(self.pos))?;
        Ok((x, self.cls.map(|id| b.var(id))))
    }

    /// Token embeddings of a clip with positional encodings added.
    pub fn tokenize(&self, clip: &VideoClip) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let (x, cls) = self.tokenize_graph(&mut g, &b, clip)?;
        let cls = cls.map(|v| g.value(v).data().to_vec());
        TokenGrid::new(
            self.cfg.temporal_tokens(),
            self.cfg.spatial_tokens(),
            g.value(x).clone(),
            cls,
        )
    }

    fn layer_norm_affine(
        g: &mut Graph,
        b: &Binding,
        x: Var,
        gain: ParamId,
        bias: ParamId,
    ) -> Result<Var> {
        let y = g.layer_norm(x)?;
        let y = g.mul_row(y, b.var(gain))?;
        g.add_row(y, b.var(bias))
    }

    fn block_graph(&self, g: &mut Graph, b: &Binding, i: usize, x: Var) -> Result<Var> {
        let p = &self.blocks[i];
        let w = p.width;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != w {
            return Err(dim_err!("block {i} of width {w} got {:?}", shape));
        }
        let h = Self::layer_norm_affine(g, b, x, p.ln1_g, p.ln1_b)?;
        let qkv = affine(g, b, h, p.qkv_w, p.qkv_b)?;
        let q = g.select(qkv, 1, &(0..w).collect::<Vec<_>>())?;
        let k = g.select(qkv, 1, &(w..2 * w).collect::<Vec<_>>())?;
        let v = g.select(qkv, 1, &(2 * w..3 * w).collect::<Vec<_>>())?;
        let (att, _) = multi_head_attention(g, q, k, v, self.cfg.heads)?;
        let att = affine(g, b, att, p.proj_w, p.proj_b)?;
        let x = g.add(x, att)?;
        let h = Self::layer_norm_affine(g, b, x, p.ln2_g, p.ln2_b)?;
        let h = affine(g, b, h, p.fc1_w, p.fc1_b)?;
        let h = g.activate(h, self.cfg.activation)?;
        let h = affine(g, b, h, p.fc2_w, p.fc2_b)?;
        g.add(x, h)
    }

    /// Runs block `i` on an `L×C` token matrix.
    pub fn attention_block(&self, i: usize, tokens: &Tensor) -> Result<Tensor> {
        if i >= self.blocks.len() {
            return Err(arg_err!("block {i} of {}", self.blocks.len()));
        }
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let x = g.constant(tokens.clone());
        let y = self.block_graph(&mut g, &b, i, x)?;
        Ok(g.value(y).clone())
    }

    fn downsample_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        tokens: Var,
        cls: Option<Var>,
        t: usize,
        n: usize,
    ) -> Result<(Var, Option<Var>)> {
        let (w, bias) = self
            .down
            .ok_or_else(|| arg_err!("model has no stage downsample"))?;
        let pooled = pool_grid_graph(g, tokens, t, n)?;
        let tokens = affine(g, b, pooled, w, bias)?;
        let cls = match cls {
            Some(c) => Some(affine(g, b, c, w, bias)?),
            None => None,
        };
        Ok((tokens, cls))
    }

    /// 2×2 pooling plus width-doubling projection of a token grid.
    pub fn stage_downsample(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let x = g.constant(grid.tokens().clone());
        let cls = match grid.class_token() {
            Some(c) => Some(g.constant(Tensor::new(vec![1, c.len()], c.to_vec())?)),
            None => None,
        };
        let (y, cls) = self.downsample_graph(&mut g, &b, x, cls, grid.t(), grid.n())?;
        let cls = cls.map(|v| g.value(v).data().to_vec());
        TokenGrid::new(grid.t(), grid.n() / 4, g.value(y).clone(), cls)
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        clip: &VideoClip,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        let (mut tokens, mut cls) = self.tokenize_graph(g, b, clip)?;
        let mut t = self.cfg.temporal_tokens();
        let mut n = self.cfg.spatial_tokens();
        let mut trace = ForwardTrace {
            logits: tokens,
            frames: None,
            temporal_indicator: None,
            anchors: None,
            site_scores: Vec::new(),
        };
        let base = |site: usize| {
            opts.base_scores
                .as_ref()
                .and_then(|s| s.get(site))
                .map(Vec::as_slice)
        };
        for i in 0..self.cfg.depth {
            if let (Some(spec), Some(p)) = (
                self.selection.temporal.filter(|s| s.layer == i),
                &self.temporal_scorer,
            ) {
                if let Some(frames) = &opts.frames_override {
                    let k = keep_count(spec.ratio, t)?;
                    if frames.len() != k || frames.iter().any(|&f| f >= t) {
                        return Err(arg_err!(
                            "frame override {frames:?} is not {k} of {t} frames"
                        ));
                    }
                    let rows: Vec<usize> =
                        frames.iter().flat_map(|&f| f * n..(f + 1) * n).collect();
                    tokens = g.select(tokens, 0, &rows)?;
                    t = k;
                    trace.site_scores.push(Vec::new());
                    trace.frames = Some(frames.clone());
                } else {
                    let cfg = PerturbConfig {
                        seed: site_seed(opts.perturb.seed, 0),
                        ..opts.perturb
                    };
                    let sel = temporal_select_graph(
                        g,
                        b,
                        p,
                        tokens,
                        t,
                        n,
                        spec.ratio,
                        opts.mode,
                        &cfg,
                        base(0),
                    )?;
                    tokens = sel.tokens;
                    t = sel.k;
                    trace.site_scores.push(sel.scores);
                    trace.frames = Some(sel.frames);
                    trace.temporal_indicator = Some(sel.indicator);
                }
            }
            if let (Some(spec), Some(p)) = (
                self.selection.spatial.filter(|s| s.layer == i),
                &self.spatial_scorer,
            ) {
                let (size, stride) = self.anchor.expect("resolved with the spatial spec");
                let side = side_of(n)
                    .ok_or_else(|| dim_err!("spatial selection needs a square grid, N={n}"))?;
                let grid = AnchorGrid::new(side, side, size, stride)?;
                let first_site = 1;
                let mut kept = Vec::with_capacity(t);
                let mut anchors = Vec::with_capacity(t);
                if let Some(chosen) = &opts.anchors_override {
                    if chosen.len() != t || chosen.iter().any(|&a| a >= grid.count()) {
                        return Err(arg_err!(
                            "anchor override {chosen:?} does not fit {t} frames"
                        ));
                    }
                }
                for f in 0..t {
                    let frame_rows = f * n..(f + 1) * n;
                    if let Some(chosen) = &opts.anchors_override {
                        let rows: Vec<usize> =
                            grid.anchor(chosen[f]).iter().map(|r| f * n + r).collect();
                        kept.push(g.select(tokens, 0, &rows)?);
                        anchors.push(chosen[f]);
                        continue;
                    }
                    let rows: Vec<usize> = frame_rows.collect();
                    let frame = g.select(tokens, 0, &rows)?;
                    let site = first_site + f;
                    let cfg = PerturbConfig {
                        seed: site_seed(opts.perturb.seed, site),
                        ..opts.perturb
                    };
                    let sel =
                        spatial_select_graph(g, b, p, frame, &grid, opts.mode, &cfg, base(site))?;
                    kept.push(sel.tokens);
                    anchors.push(sel.anchor);
                    while trace.site_scores.len() < site {
                        trace.site_scores.push(Vec::new());
                    }
                    trace.site_scores.push(sel.anchor_scores);
                }
                debug_assert_eq!(spec.layer, i);
                tokens = if kept.len() == 1 {
                    kept[0]
                } else {
                    g.concat(&kept, 0)?
                };
                n = size * size;
                trace.anchors = Some(anchors);
            }
            let seq = match cls {
                Some(c) => g.concat(&[c, tokens], 0)?,
                None => tokens,
            };
            let seq = self.block_graph(g, b, i, seq)?;
            if cls.is_some() {
                let rows = g.shape(seq)[0];
                cls = Some(g.select(seq, 0, &[0])?);
                tokens = g.select(seq, 0, &(1..rows).collect::<Vec<_>>())?;
            } else {
                tokens = seq;
            }
            if self.cfg.downsample_after == Some(i) {
                let (x, c) = self.downsample_graph(g, b, tokens, cls, t, n)?;
                tokens = x;
                cls = c;
                n /= 4;
            }
        }
        let summary = match cls {
            Some(c) => c,
            None => g.reduce(tokens, 0, Reduction::Mean)?,
        };
        let summary = g.reshape(summary, vec![1, self.cfg.width_at(self.cfg.depth)])?;
        let h = Self::layer_norm_affine(g, b, summary, self.norm_g, self.norm_b)?;
        trace.logits = affine(g, b, h, self.head_w, self.head_b)?;
        Ok(trace)
    }

    /// Cross-entropy loss of one labelled clip on `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        clip: &VideoClip,
        label: usize,
        opts: &ForwardOptions,
    ) -> Result<(Var, ForwardTrace)> {
        let trace = self.forward_graph(g, b, clip, opts)?;
        let loss = g.cross_entropy(trace.logits, &[label])?;
        Ok((loss, trace))
    }

    /// Logits and selections of one clip without gradient tracking.
    pub fn forward_with(&self, clip: &VideoClip, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let trace = self.forward_graph(&mut g, &b, clip, opts)?;
        Ok(ForwardOutput {
            logits: g.value(trace.logits).data().to_vec(),
            frames: trace.frames,
            anchors: trace.anchors,
        })
    }

    /// Logits of one clip. `sigma` only matters in smoothed mode.
    pub fn forward(&self, clip: &VideoClip, mode: SelectionMode, sigma: f32) -> Result<Vec<f32>> {
        let opts = ForwardOptions {
            mode,
            perturb: PerturbConfig::new(sigma, PerturbConfig::default().n_samples, 0)?,
            ..ForwardOptions::default()
        };
        Ok(self.forward_with(clip, &opts)?.logits)
    }
}
