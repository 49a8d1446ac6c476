//! Spatial-temporal token selection for video transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape
//! - [`topk`]: hard and perturbed (smoothed) Top-K with its Monte-Carlo VJP
//! - [`select`]: scorer networks, temporal frame selection, anchor-based
//!   spatial selection
//! - [`config`]: model architecture, selection specs and the selection-name
//!   grammar
//! - [`model`]: a small video transformer with selection insertion points
//! - [`synth`]: labeled synthetic clips with known informative frames/regions
//! - [`cost`]: analytic FLOPs accounting
//! - [`harness`]: training, evaluation, sweeps and
//!   on-disk formats

pub mod config;
pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod select;
pub mod synth;
pub mod tensor;
pub mod topk;

pub use error::{Error, Result};
