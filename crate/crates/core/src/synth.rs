//! Synthetic labelled clips with known informative frames and region.
//!
//! Every frame is mid-grey plus Gaussian noise. In each signal frame the
//! class grating is stamped into one cube-aligned square region; all other
//! content is independent of the label. Signal frames fall in distinct
//! `cube_t` groups, so each one maps to its own temporal token.
//!
//! Samples are generated from per-sample ChaCha streams and can be produced
//! in parallel without changing the result.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{arg_err, Error, Result};
use crate::model::VideoClip;
use crate::select::AnchorGrid;

pub const DATASET_MAGIC: &[u8; 8] = b"STTSDAT1";

/// Generator parameters; the JSON sidecar of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub signal_frame_count: usize,
    pub region_size: usize,
    pub noise_level: f32,
    /// Frames per temporal token; signal frames land in distinct groups.
    pub cube_t: usize,
    /// Region alignment in pixels.
    pub cube_p: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            classes: 4,
            samples: 4000,
            frames: 8,
            height: 24,
            width: 24,
            channels: 3,
            signal_frame_count: 2,
            region_size: 8,
            noise_level: 0.1,
            cube_t: 2,
            cube_p: 4,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    /// Default generator sized for a model configuration.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        GeneratorSpec {
            classes: cfg.classes,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            channels: cfg.channels,
            cube_t: cfg.cube_t,
            cube_p: cfg.cube_p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(arg_err!("need at least 2 classes"));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(arg_err!("clip dimensions must be positive"));
        }
        if self.cube_t == 0 || self.cube_p == 0 {
            return Err(arg_err!("cube sizes must be positive"));
        }
        if self.frames > 64 {
            return Err(arg_err!("at most 64 frames fit the signal-frame bitmask"));
        }
        if !self.frames.is_multiple_of(self.cube_t)
            || !self.height.is_multiple_of(self.cube_p)
            || !self.width.is_multiple_of(self.cube_p)
        {
            return Err(arg_err!(
                "clip dimensions must be divisible by the cube sizes"
            ));
        }
        if self.signal_frame_count == 0 || self.signal_frame_count > self.frames / self.cube_t {
            return Err(arg_err!(
                "{} signal frames do not fit {} frame groups",
                self.signal_frame_count,
                self.frames / self.cube_t
            ));
        }
        if self.region_size == 0 || self.region_size > self.height || self.region_size > self.width
        {
            return Err(arg_err!(
                "region {} exceeds the {}x{} clip",
                self.region_size,
                self.height,
                self.width
            ));
        }
        if !self.region_size.is_multiple_of(self.cube_p) {
            return Err(arg_err!("region size must be a multiple of cube_p"));
        }
        if self.region_size > u16::MAX as usize
            || self.height > u16::MAX as usize
            || self.width > u16::MAX as usize
        {
            return Err(arg_err!("region coordinates must fit 16 bits"));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(arg_err!("noise level must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Pixel rectangle `(row, col, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub clip: VideoClip,
    pub label: usize,
    /// Ascending frame indices carrying the class pattern.
    pub signal_frames: Vec<usize>,
    pub region: Region,
    pub noise_level: f32,
}

/// Class pattern value at `(y, x)` inside a `size × size` region: an oriented
/// grating with two cycles across the region.
pub fn class_pattern(class: usize, classes: usize, size: usize, y: usize, x: usize) -> f32 {
    let theta = std::f64::consts::PI * class as f64 / classes as f64;
    let u = (x as f64 + 0.5) * theta.cos() + (y as f64 + 0.5) * theta.sin();
    let cycles = 2.0;
    (0.5 + 0.5 * (2.0 * std::f64::consts::PI * cycles * u / size as f64).sin()) as f32
}

/// The layout a sample index gets: signal frames, region and noise.
struct Layout {
    signal_frames: Vec<usize>,
    region: Region,
    rng: ChaCha8Rng,
}

fn layout(spec: &GeneratorSpec, index: usize) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * index as u64 + 1);
    let groups = spec.frames / spec.cube_t;
    let mut signal_frames: Vec<usize> = sample_indices(&mut rng, groups, spec.signal_frame_count)
        .into_iter()
        .map(|g| g * spec.cube_t + rng.random_range(0..spec.cube_t))
        .collect();
    signal_frames.sort_unstable();
    let rows = (spec.height - spec.region_size) / spec.cube_p + 1;
    let cols = (spec.width - spec.region_size) / spec.cube_p + 1;
    let region = Region {
        row: rng.random_range(0..rows) * spec.cube_p,
        col: rng.random_range(0..cols) * spec.cube_p,
        height: spec.region_size,
        width: spec.region_size,
    };
    Layout {
        signal_frames,
        region,
        rng,
    }
}

fn label_of(spec: &GeneratorSpec, index: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * index as u64);
    rng.random_range(0..spec.classes)
}

/// Sample `index` of the dataset described by `spec`, with its label
/// overridden. Everything except the stamped pattern depends only on
/// `(seed, index)`.
pub fn generate_sample(
    spec: &GeneratorSpec,
    index: usize,
    label: usize,
) -> Result<SyntheticSample> {
    spec.validate()?;
    if label >= spec.classes {
        return Err(arg_err!("label {label} out of range {}", spec.classes));
    }
    let Layout {
        signal_frames,
        region,
        mut rng,
    } = layout(spec, index);
    let mut clip = VideoClip::zeros(spec.frames, spec.height, spec.width, spec.channels);
    let noise = Normal::new(0.0f32, spec.noise_level).map_err(|e| arg_err!("noise: {e}"))?;
    for d in 0..spec.frames {
        let signal = signal_frames.contains(&d);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let inside = signal
                    && (region.row..region.row + region.height).contains(&y)
                    && (region.col..region.col + region.width).contains(&x);
                let base = if inside {
                    class_pattern(
                        label,
                        spec.classes,
                        spec.region_size,
                        y - region.row,
                        x - region.col,
                    )
                } else {
                    0.5
                };
                for c in 0..spec.channels {
                    let v = base + noise.sample(&mut rng);
                    clip.set(d, y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(SyntheticSample {
        clip,
        label,
        signal_frames,
        region,
        noise_level: spec.noise_level,
    })
}

/// In-memory dataset with its generator spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub samples: Vec<SyntheticSample>,
}

/// All samples of `spec`, generated in parallel.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.samples)
        .into_par_iter()
        .map(|i| generate_sample(spec, i, label_of(spec, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Informative tokens of one sample under a model's tokenizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    /// Temporal token indices holding a signal frame.
    pub frames: BTreeSet<usize>,
    /// Spatial token indices (row-major in the grid) covered by the region.
    pub tokens: BTreeSet<usize>,
    grid_side: usize,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl GroundTruth {
    /// Anchors of `grid` whose block contains every region token.
    pub fn covering_anchors(&self, grid: &AnchorGrid) -> BTreeSet<usize> {
        grid.corners()
            .iter()
            .enumerate()
            .filter(|(_, &(r, c))| {
                r <= self.rows.0
                    && self.rows.1 <= r + grid.p()
                    && c <= self.cols.0
                    && self.cols.1 <= c + grid.p()
            })
            .map(|(g, _)| g)
            .collect()
    }

    /// Anchors of `grid` sharing at least one token with the region.
    pub fn overlapping_anchors(&self, grid: &AnchorGrid) -> BTreeSet<usize> {
        grid.corners()
            .iter()
            .enumerate()
            .filter(|(_, &(r, c))| {
                r < self.rows.1
                    && self.rows.0 < r + grid.p()
                    && c < self.cols.1
                    && self.cols.0 < c + grid.p()
            })
            .map(|(g, _)| g)
            .collect()
    }

    /// Anchors counted as correct: covering anchors, or overlapping ones
    /// when the anchor is too small to cover the region.
    pub fn correct_anchors(&self, grid: &AnchorGrid) -> BTreeSet<usize> {
        let cover = self.covering_anchors(grid);
        if cover.is_empty() {
            self.overlapping_anchors(grid)
        } else {
            cover
        }
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }
}

pub fn ground_truth_tokens(sample: &SyntheticSample, cfg: &ModelConfig) -> Result<GroundTruth> {
    let r = sample.region;
    let p = cfg.cube_p;
    if !r.row.is_multiple_of(p)
        || !r.col.is_multiple_of(p)
        || !r.height.is_multiple_of(p)
        || !r.width.is_multiple_of(p)
        || r.height == 0
        || r.width == 0
    {
        return Err(arg_err!("region {r:?} is not aligned to {p}-pixel cubes"));
    }
    if r.row + r.height > cfg.height || r.col + r.width > cfg.width {
        return Err(arg_err!(
            "region {r:?} exceeds the {}x{} clip",
            cfg.height,
            cfg.width
        ));
    }
    if sample.signal_frames.iter().any(|&f| f >= cfg.frames) {
        return Err(arg_err!("signal frame beyond the clip length"));
    }
    let side = cfg.grid_side();
    let rows = (r.row / p, (r.row + r.height) / p);
    let cols = (r.col / p, (r.col + r.width) / p);
    let tokens = (rows.0..rows.1)
        .flat_map(|y| (cols.0..cols.1).map(move |x| y * side + x))
        .collect();
    Ok(GroundTruth {
        frames: sample
            .signal_frames
            .iter()
            .map(|f| f / cfg.cube_t)
            .collect(),
        tokens,
        grid_side: side,
        rows,
        cols,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit 32 bits")))
}

/// Binary encoding of a dataset (see [`write_dataset`]).
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let s = &ds.spec;
    let per = s.frames * s.height * s.width * s.channels;
    let mut out = Vec::with_capacity(32 + ds.samples.len() * (20 + 4 * per));
    out.extend_from_slice(DATASET_MAGIC);
    for (v, what) in [
        (ds.samples.len(), "sample count"),
        (s.frames, "frames"),
        (s.height, "height"),
        (s.width, "width"),
        (s.channels, "channels"),
        (s.classes, "classes"),
    ] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    for smp in &ds.samples {
        let c = &smp.clip;
        if (c.frames(), c.height(), c.width(), c.channels())
            != (s.frames, s.height, s.width, s.channels)
        {
            return Err(Error::Format(
                "sample clip does not match the dataset header".into(),
            ));
        }
        out.extend_from_slice(&u32_of(smp.label, "label")?.to_le_bytes());
        let mask = smp.signal_frames.iter().fold(0u64, |m, &f| m | (1u64 << f));
        out.extend_from_slice(&mask.to_le_bytes());
        let r = smp.region;
        for v in [r.row, r.col, r.height, r.width] {
            let v = u16::try_from(v)
                .map_err(|_| Error::Format(format!("region value {v} exceeds 16 bits")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in c.pixels() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a dataset; the generator spec comes from the caller.
pub fn decode_dataset(bytes: &[u8], spec: GeneratorSpec) -> Result<Dataset> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::Format("not an STTSDAT1 dataset".into()));
    }
    let n = r.u32()? as usize;
    let dims: Vec<usize> = (0..5)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let (d, h, w, ch, classes) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    if (d, h, w, ch, classes)
        != (
            spec.frames,
            spec.height,
            spec.width,
            spec.channels,
            spec.classes,
        )
    {
        return Err(Error::Format(
            "dataset header disagrees with its sidecar".into(),
        ));
    }
    let per = d * h * w * ch;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.u32()? as usize;
        if label >= classes {
            return Err(Error::Format(format!(
                "label {label} out of range {classes}"
            )));
        }
        let mask = r.u64()?;
        let signal_frames = (0..64)
            .filter(|b| mask >> b & 1 == 1)
            .collect::<Vec<usize>>();
        let region = Region {
            row: r.u16()? as usize,
            col: r.u16()? as usize,
            height: r.u16()? as usize,
            width: r.u16()? as usize,
        };
        let pixels = r
            .take(4 * per)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(SyntheticSample {
            clip: VideoClip::new(d, h, w, ch, pixels)?,
            label,
            signal_frames,
            region,
            noise_level: spec.noise_level,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Dataset { spec, samples })
}

/// Writes `path` (binary samples) and `path.json` (generator spec).
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&ds.spec).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let spec: GeneratorSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, spec)
}
