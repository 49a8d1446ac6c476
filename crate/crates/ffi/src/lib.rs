//! C ABI over `stts`.
//!
//! Every function returns an [`SttsStatus`]. On failure the message of the
//! last error on the calling thread is available through
//! [`stts_last_error_message`]. Objects are opaque handles released by their
//! `_free` function; output buffers are owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use stts::config::{parse_selection, ModelConfig};
use stts::cost::count_flops;
use stts::harness::load_checkpoint;
use stts::model::{ToyVit, VideoClip};
use stts::select::{build_anchor_grid, AnchorGrid};
use stts::topk::{hard_topk, soft_topk_forward, soft_topk_vjp, PerturbConfig, SelectionMode};
use stts::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SttsStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Numeric = 3,
    Index = 4,
    Argument = 5,
    Mode = 6,
    Tape = 7,
    Parse = 8,
    Version = 9,
    Format = 10,
    Io = 11,
    Utf8 = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

struct LastError {
    message: String,
    position: usize,
}

thread_local! {
    static LAST: RefCell<LastError> = const {
        RefCell::new(LastError {
            message: String::new(),
            position: 0,
        })
    };
}

fn record(status: SttsStatus, message: String, position: usize) -> SttsStatus {
    LAST.with(|l| *l.borrow_mut() = LastError { message, position });
    status
}

fn status_of(e: &Error) -> SttsStatus {
    match e {
        Error::Dimension(_) => SttsStatus::Dimension,
        Error::Numeric(_) => SttsStatus::Numeric,
        Error::Index(_) => SttsStatus::Index,
        Error::Argument(_) => SttsStatus::Argument,
        Error::Mode(_) => SttsStatus::Mode,
        Error::Tape(_) => SttsStatus::Tape,
        Error::Parse { .. } => SttsStatus::Parse,
        Error::Version(_) => SttsStatus::Version,
        Error::Format(_) => SttsStatus::Format,
        Error::Io { .. } => SttsStatus::Io,
    }
}

enum Fail {
    Core(Error),
    Other(SttsStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

type FfiResult = std::result::Result<(), Fail>;

fn null(what: &str) -> Fail {
    Fail::Other(SttsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> FfiResult) -> SttsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => record(SttsStatus::Ok, String::new(), 0),
        Ok(Err(Fail::Core(e))) => {
            let pos = match &e {
                Error::Parse { pos, .. } => *pos,
                _ => 0,
            };
            record(status_of(&e), e.to_string(), pos)
        }
        Ok(Err(Fail::Other(s, m))) => record(s, m, 0),
        Err(_) => record(SttsStatus::Panic, "internal panic".into(), 0),
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> std::result::Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> std::result::Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Other(SttsStatus::Utf8, format!("{what} is not UTF-8")))
}

fn copy_into<T: Copy>(dst: &mut [T], src: &[T]) -> FfiResult {
    if dst.len() != src.len() {
        return Err(Fail::Other(
            SttsStatus::BufferTooSmall,
            format!("buffer holds {}, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Copies the last error message of this thread, NUL-terminated and
/// truncated to `cap` bytes, into `buf`. Returns the full message length
/// without the terminator.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn stts_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST.with(|l| {
        let l = l.borrow();
        let bytes = l.message.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Byte offset of the last parse error on this thread.
#[no_mangle]
pub extern "C" fn stts_last_error_position() -> usize {
    LAST.with(|l| l.borrow().position)
}

/// Hard Top-K: writes the `k` selected positions of `scores`, ascending.
///
/// # Safety
/// `scores` must hold `len` floats and `out_indices` room for `k` values.
#[no_mangle]
pub unsafe extern "C" fn stts_hard_topk(
    scores: *const f32,
    len: usize,
    k: usize,
    out_indices: *mut usize,
) -> SttsStatus {
    guard(|| {
        let s = input(scores, len, "scores")?;
        let out = output(out_indices, k, "out_indices")?;
        let ind = hard_topk(s, k)?;
        copy_into(out, ind.indices().unwrap_or_default())
    })
}

/// Smoothed Top-K: writes the row-major `len×k` expected indicator.
///
/// # Safety
/// `scores` must hold `len` floats and `out_matrix` room for `len·k`.
#[no_mangle]
pub unsafe extern "C" fn stts_soft_topk(
    scores: *const f32,
    len: usize,
    k: usize,
    sigma: f32,
    samples: usize,
    seed: u64,
    out_matrix: *mut f32,
) -> SttsStatus {
    guard(|| {
        let s = input(scores, len, "scores")?;
        let out = output(out_matrix, len * k, "out_matrix")?;
        let cfg = PerturbConfig::new(sigma, samples, seed)?;
        copy_into(out, soft_topk_forward(s, k, &cfg)?.matrix())
    })
}

/// Vector-Jacobian product of the smoothed Top-K for a row-major `len×k`
/// upstream gradient; writes `len` values.
///
/// # Safety
/// `scores` and `out_grad` must hold `len` floats, `upstream` `len·k`.
#[no_mangle]
pub unsafe extern "C" fn stts_soft_topk_vjp(
    scores: *const f32,
    len: usize,
    k: usize,
    sigma: f32,
    samples: usize,
    seed: u64,
    upstream: *const f32,
    out_grad: *mut f32,
) -> SttsStatus {
    guard(|| {
        let s = input(scores, len, "scores")?;
        let up = input(upstream, len * k, "upstream")?;
        let out = output(out_grad, len, "out_grad")?;
        let cfg = PerturbConfig::new(sigma, samples, seed)?;
        copy_into(out, &soft_topk_vjp(s, k, &cfg, up)?)
    })
}

/// Opaque anchor grid.
pub struct SttsAnchorGrid(AnchorGrid);

/// Builds the `P×P` windows at stride `s` over an `h×w` token grid.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle to free
/// with [`stts_anchor_grid_free`].
#[no_mangle]
pub unsafe extern "C" fn stts_anchor_grid_new(
    h: usize,
    w: usize,
    p: usize,
    s: usize,
    out: *mut *mut SttsAnchorGrid,
) -> SttsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = build_anchor_grid(h, w, p, s)?;
        *out = Box::into_raw(Box::new(SttsAnchorGrid(grid)));
        Ok(())
    })
}

/// # Safety
/// `grid` must come from [`stts_anchor_grid_new`] and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn stts_anchor_grid_count(
    grid: *const SttsAnchorGrid,
    out: *mut usize,
) -> SttsStatus {
    guard(|| {
        let (Some(g), false) = (grid.as_ref(), out.is_null()) else {
            return Err(null("grid or out"));
        };
        *out = g.0.count();
        Ok(())
    })
}

/// Writes the `P²` token indices of anchor `index`, row-major.
///
/// # Safety
/// `grid` must come from [`stts_anchor_grid_new`]; `out_tokens` must hold
/// `cap` values.
#[no_mangle]
pub unsafe extern "C" fn stts_anchor_grid_tokens(
    grid: *const SttsAnchorGrid,
    index: usize,
    out_tokens: *mut usize,
    cap: usize,
) -> SttsStatus {
    guard(|| {
        let g = grid.as_ref().ok_or_else(|| null("grid"))?;
        if index >= g.0.count() {
            return Err(Error::Index(format!("anchor {index} of {}", g.0.count())).into());
        }
        let tokens = g.0.anchor(index);
        let out = output(out_tokens, cap, "out_tokens")?;
        copy_into(out, tokens)
    })
}

/// # Safety
/// `grid` must come from [`stts_anchor_grid_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn stts_anchor_grid_free(grid: *mut SttsAnchorGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Parsed selection name. Absent clauses have `has_* = false`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SttsSelection {
    pub has_temporal: bool,
    pub temporal_layer: usize,
    pub temporal_ratio: f32,
    pub has_spatial: bool,
    pub spatial_layer: usize,
    pub spatial_ratio: f32,
}

/// Parses a selection name such as `tiny-T0_0.4-S2_0.6`. On a parse error
/// [`stts_last_error_position`] gives the offending byte offset.
///
/// # Safety
/// `name` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stts_parse_selection(
    name: *const c_char,
    out: *mut SttsSelection,
) -> SttsStatus {
    guard(|| {
        let name = text(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sel = parse_selection(name)?.selection;
        let mut s = SttsSelection::default();
        if let Some(t) = sel.temporal {
            (s.has_temporal, s.temporal_layer, s.temporal_ratio) = (true, t.layer, t.ratio);
        }
        if let Some(sp) = sel.spatial {
            (s.has_spatial, s.spatial_layer, s.spatial_ratio) = (true, sp.layer, sp.ratio);
        }
        *out = s;
        Ok(())
    })
}

/// Forward FLOPs of a selection name and of its backbone without selection.
///
/// # Safety
/// `name` must be NUL-terminated; `out_total` and `out_baseline` valid.
#[no_mangle]
pub unsafe extern "C" fn stts_count_flops(
    name: *const c_char,
    out_total: *mut u64,
    out_baseline: *mut u64,
) -> SttsStatus {
    guard(|| {
        let name = text(name, "name")?;
        if out_total.is_null() || out_baseline.is_null() {
            return Err(null("output"));
        }
        let parsed = parse_selection(name)?;
        let cfg = ModelConfig::from_backbone(&parsed.backbone)?;
        let r = count_flops(&cfg, &parsed.selection)?;
        (*out_total, *out_baseline) = (r.total, r.baseline_total);
        Ok(())
    })
}

/// Opaque trained model.
pub struct SttsModel(ToyVit);

/// Loads a checkpoint and its sidecar.
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid. Free the handle with
/// [`stts_model_free`].
#[no_mangle]
pub unsafe extern "C" fn stts_model_load(
    path: *const c_char,
    out: *mut *mut SttsModel,
) -> SttsStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(SttsModel(model)));
        Ok(())
    })
}

/// Input shape `[frames, height, width, channels]` and class count.
///
/// # Safety
/// `model` from [`stts_model_load`]; `out_shape` holds 4 values.
#[no_mangle]
pub unsafe extern "C" fn stts_model_shape(
    model: *const SttsModel,
    out_shape: *mut usize,
    out_classes: *mut usize,
) -> SttsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_classes.is_null() {
            return Err(null("out_classes"));
        }
        let c = m.0.config();
        copy_into(
            output(out_shape, 4, "out_shape")?,
            &[c.frames, c.height, c.width, c.channels],
        )?;
        *out_classes = c.classes;
        Ok(())
    })
}

/// Hard-selection forward pass of one clip laid out frame, row, column,
/// channel. Writes `classes` logits.
///
/// # Safety
/// `pixels` holds `len` floats; `out_logits` holds `classes` floats.
#[no_mangle]
pub unsafe extern "C" fn stts_model_forward(
    model: *const SttsModel,
    pixels: *const f32,
    len: usize,
    out_logits: *mut f32,
    classes: usize,
) -> SttsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = m.0.config();
        let clip = VideoClip::new(
            c.frames,
            c.height,
            c.width,
            c.channels,
            input(pixels, len, "pixels")?.to_vec(),
        )?;
        let logits = m.0.forward(&clip, SelectionMode::Hard, 0.0)?;
        copy_into(output(out_logits, classes, "out_logits")?, &logits)
    })
}

/// # Safety
/// `model` must come from [`stts_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn stts_model_free(model: *mut SttsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
