//! Model and selection configuration, including the selection-name grammar
//! `BACKBONE[-T<layer>_<ratio>][-S<layer>_<ratio>]`.
//!
//! `tiny-T0_0.4-S2_0.6` keeps 40% of the frames before block 0 and, before
//! block 2, one anchor covering about 60% of each frame's tokens.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::select::side_of;
use crate::tensor::Activation;

/// Architecture of the toy video transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: String,
    /// Clip length `D` in frames.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub cube_t: usize,
    pub cube_p: usize,
    /// Embedding width `C` of the first stage.
    pub embed: usize,
    pub heads: usize,
    pub depth: usize,
    /// Halve the grid side and double the width after this block.
    pub downsample_after: Option<usize>,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub class_token: bool,
}

impl ModelConfig {
    /// D=8, 24×24 pixels, 2×4×4 cubes (T=4, N=36), C=32, 2 heads, 4 blocks.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: "tiny".into(),
            frames: 8,
            height: 24,
            width: 24,
            channels: 3,
            cube_t: 2,
            cube_p: 4,
            embed: 32,
            heads: 2,
            depth: 4,
            downsample_after: None,
            classes: 4,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            class_token: true,
        }
    }

    /// `tiny` with a 2×2 stage downsample after block 2.
    pub fn tiny_hierarchical() -> Self {
        ModelConfig {
            backbone: "tinyh".into(),
            downsample_after: Some(2),
            ..Self::tiny()
        }
    }

    pub fn from_backbone(tag: &str) -> Result<Self> {
        match tag {
            "tiny" => Ok(Self::tiny()),
            "tinyh" => Ok(Self::tiny_hierarchical()),
            other => Err(arg_err!("unknown backbone {other:?}")),
        }
    }

    pub fn temporal_tokens(&self) -> usize {
        self.frames / self.cube_t
    }

    pub fn grid_side(&self) -> usize {
        self.height / self.cube_p
    }

    pub fn spatial_tokens(&self) -> usize {
        (self.height / self.cube_p) * (self.width / self.cube_p)
    }

    pub fn cube_len(&self) -> usize {
        self.cube_t * self.cube_p * self.cube_p * self.channels
    }

    /// Embedding width entering block `i`.
    pub fn width_at(&self, block: usize) -> usize {
        match self.downsample_after {
            Some(d) if block > d => self.embed * 2,
            _ => self.embed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, what: &str| {
            if v == 0 {
                Err(arg_err!("{what} must be positive"))
            } else {
                Ok(())
            }
        };
        pos(self.frames, "frames")?;
        pos(self.height, "height")?;
        pos(self.width, "width")?;
        pos(self.channels, "channels")?;
        pos(self.cube_t, "cube_t")?;
        pos(self.cube_p, "cube_p")?;
        pos(self.embed, "embed")?;
        pos(self.heads, "heads")?;
        pos(self.depth, "depth")?;
        pos(self.mlp_ratio, "mlp_ratio")?;
        if self.classes < 2 {
            return Err(arg_err!("need at least 2 classes"));
        }
        if !self.frames.is_multiple_of(self.cube_t)
            || !self.height.is_multiple_of(self.cube_p)
            || !self.width.is_multiple_of(self.cube_p)
        {
            return Err(arg_err!(
                "clip dimensions must be divisible by the cube sizes"
            ));
        }
        if self.height != self.width {
            return Err(arg_err!("token grids must be square"));
        }
        if !self.embed.is_multiple_of(self.heads) || !self.embed.is_multiple_of(2) {
            return Err(arg_err!(
                "embed width must be even and divisible by the head count"
            ));
        }
        if let Some(d) = self.downsample_after {
            if d >= self.depth {
                return Err(arg_err!(
                    "downsample after block {d} but depth is {}",
                    self.depth
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSpec {
    pub layer: usize,
    pub ratio: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialSpec {
    pub layer: usize,
    pub ratio: f32,
    /// Anchor side; derived from the ratio when absent.
    #[serde(default)]
    pub anchor: Option<usize>,
    /// Anchor stride; 1 when absent.
    #[serde(default)]
    pub stride: Option<usize>,
}

impl SpatialSpec {
    /// Anchor side and stride on a grid of side `side`:
    /// `P = clamp(round(√(ratio·side²)), 1, side)`, stride 1 by default.
    pub fn resolve(&self, side: usize) -> Result<(usize, usize)> {
        let p = match self.anchor {
            Some(p) => p,
            None => {
                let n = (side * side) as f64;
                ((self.ratio as f64 * n).sqrt().round() as usize).clamp(1, side)
            }
        };
        let s = self.stride.unwrap_or(1);
        if p < 1 || p > side || s < 1 || !(side - p).is_multiple_of(s) {
            return Err(arg_err!(
                "anchor {p} with stride {s} does not fit a {side}x{side} grid"
            ));
        }
        Ok((p, s))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub temporal: Option<TemporalSpec>,
    pub spatial: Option<SpatialSpec>,
}

impl SelectionConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.temporal.is_none() && self.spatial.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temporal {
            check_ratio(t.ratio)?;
        }
        if let Some(s) = self.spatial {
            check_ratio(s.ratio)?;
        }
        if let (Some(t), Some(s)) = (self.temporal, self.spatial) {
            if t.layer > s.layer {
                return Err(arg_err!(
                    "temporal selection (block {}) must not follow spatial selection (block {})",
                    t.layer,
                    s.layer
                ));
            }
        }
        Ok(())
    }

    /// Checks insertion points against a model and returns, for a spatial
    /// selection, the resolved anchor side and stride.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<Option<(usize, usize)>> {
        self.validate()?;
        if let Some(t) = self.temporal {
            if t.layer >= cfg.depth {
                return Err(arg_err!(
                    "temporal selection at block {} of {}",
                    t.layer,
                    cfg.depth
                ));
            }
        }
        let Some(s) = self.spatial else {
            return Ok(None);
        };
        if s.layer >= cfg.depth {
            return Err(arg_err!(
                "spatial selection at block {} of {}",
                s.layer,
                cfg.depth
            ));
        }
        let mut side = cfg.grid_side();
        if let Some(d) = cfg.downsample_after {
            if s.layer > d {
                side /= 2;
            }
        }
        let (p, stride) = s.resolve(side)?;
        if let Some(d) = cfg.downsample_after {
            if s.layer <= d && p % 2 != 0 {
                return Err(arg_err!(
                    "anchor side {p} is odd but a 2x2 downsample follows"
                ));
            }
        }
        if side_of(p * p) != Some(p) {
            return Err(Error::Dimension("anchor is not square".into()));
        }
        Ok(Some((p, stride)))
    }
}

fn check_ratio(r: f32) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(arg_err!("keep ratio {r} outside (0, 1]"))
    }
}

/// A backbone tag plus its selection modules.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionName {
    pub backbone: String,
    pub selection: SelectionConfig,
}

impl fmt::Display for SelectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.backbone)?;
        if let Some(t) = self.selection.temporal {
            write!(f, "-T{}_{:?}", t.layer, t.ratio)?;
        }
        if let Some(s) = self.selection.spatial {
            write!(f, "-S{}_{:?}", s.layer, s.ratio)?;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    text: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn digits(&mut self) -> &str {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.text[start..self.pos]).unwrap()
    }

    fn int(&mut self) -> Result<usize> {
        let d = self.digits();
        if d.is_empty() {
            return Err(self.err("expected a block index"));
        }
        d.parse().map_err(|_| self.err("block index out of range"))
    }

    fn ratio(&mut self) -> Result<f32> {
        let start = self.pos;
        if self.digits().is_empty() {
            return Err(self.err("expected a keep ratio"));
        }
        if self.eat(b'.') && self.digits().is_empty() {
            return Err(self.err("expected digits after the decimal point"));
        }
        let text = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        let r: f32 = text.parse().map_err(|_| Error::Parse {
            pos: start,
            msg: format!("bad ratio {text:?}"),
        })?;
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Parse {
                pos: start,
                msg: format!("keep ratio {text} outside (0, 1]"),
            });
        }
        Ok(r)
    }

    /// `-<tag><int>_<dec>` clause, if the next clause carries `tag`.
    fn clause(&mut self, tag: u8) -> Result<Option<(usize, f32)>> {
        if self.peek() != Some(b'-') || self.text.get(self.pos + 1) != Some(&tag) {
            return Ok(None);
        }
        self.pos += 2;
        let layer = self.int()?;
        if !self.eat(b'_') {
            return Err(self.err("expected '_' between block index and ratio"));
        }
        let ratio = self.ratio()?;
        Ok(Some((layer, ratio)))
    }
}

/// Parses `BACKBONE("-T"INT"_"DEC)?("-S"INT"_"DEC)?`.
pub fn parse_selection(name: &str) -> Result<SelectionName> {
    let mut cur = Cursor {
        text: name.as_bytes(),
        pos: 0,
    };
    while cur.peek().is_some_and(|c| c.is_ascii_alphanumeric()) {
        cur.pos += 1;
    }
    if cur.pos == 0 {
        return Err(cur.err("expected a backbone tag"));
    }
    let backbone = name[..cur.pos].to_string();
    let temporal = cur
        .clause(b'T')?
        .map(|(layer, ratio)| TemporalSpec { layer, ratio });
    let s_pos = cur.pos;
    let spatial = cur.clause(b'S')?.map(|(layer, ratio)| SpatialSpec {
        layer,
        ratio,
        anchor: None,
        stride: None,
    });
    if cur.pos != name.len() {
        return Err(cur.err(format!("unexpected trailing text {:?}", &name[cur.pos..])));
    }
    if let (Some(t), Some(s)) = (temporal, spatial) {
        if t.layer > s.layer {
            return Err(Error::Parse {
                pos: s_pos,
                msg: format!(
                    "spatial selection at block {} precedes temporal selection at block {}",
                    s.layer, t.layer
                ),
            });
        }
    }
    Ok(SelectionName {
        backbone,
        selection: SelectionConfig { temporal, spatial },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_clauses() {
        let n = parse_selection("tiny-T0_0.4-S2_0.6").unwrap();
        assert_eq!(n.backbone, "tiny");
        assert_eq!(
            n.selection.temporal,
            Some(TemporalSpec {
                layer: 0,
                ratio: 0.4
            })
        );
        let s = n.selection.spatial.unwrap();
        assert_eq!((s.layer, s.ratio), (2, 0.6));
    }

    #[test]
    fn bare_backbone_has_no_selection() {
        assert!(parse_selection("tiny").unwrap().selection.is_empty());
    }

    #[test]
    fn grammar_fixes_clause_order() {
        let e = parse_selection("tiny-S2_0.6-T0_0.4").unwrap_err();
        assert!(matches!(e, Error::Parse { pos: 11, .. }), "{e}");
    }

    #[test]
    fn malformed_names_report_positions() {
        for (name, pos) in [
            ("", 0),
            ("tiny-T", 6),
            ("tiny-T0", 7),
            ("tiny-T0_", 8),
            ("tiny-T0_1.", 10),
            ("tiny-T0_1.5", 8),
            ("tiny-T0_0", 8),
            ("tiny-T3_0.5-S1_0.5", 11),
            ("tiny-X", 4),
        ] {
            match parse_selection(name) {
                Err(Error::Parse { pos: p, .. }) => assert_eq!(p, pos, "{name}"),
                other => panic!("{name}: {other:?}"),
            }
        }
    }

    #[test]
    fn render_round_trips_canonical_names() {
        for name in [
            "tiny",
            "tiny-T0_0.4",
            "tiny-S2_0.6",
            "tiny-T0_0.4-S2_0.6",
            "tinyh-T1_1.0-S3_0.25",
        ] {
            assert_eq!(parse_selection(name).unwrap().to_string(), name);
        }
    }

    #[test]
    fn derived_anchor_side() {
        let s = SpatialSpec {
            layer: 0,
            ratio: 0.6,
            anchor: None,
            stride: None,
        };
        assert_eq!(s.resolve(6).unwrap(), (5, 1));
        let s = SpatialSpec { ratio: 1.0, ..s };
        assert_eq!(s.resolve(6).unwrap(), (6, 1));
        let s = SpatialSpec {
            ratio: 0.25,
            stride: Some(3),
            ..s
        };
        assert_eq!(s.resolve(6).unwrap(), (3, 3));
    }

    #[test]
    fn tiny_is_valid() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::tiny_hierarchical().validate().unwrap();
        assert_eq!(ModelConfig::tiny().temporal_tokens(), 4);
        assert_eq!(ModelConfig::tiny().spatial_tokens(), 36);
    }
}
