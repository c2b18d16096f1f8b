//! Anchor-free 3D lesion detection toolkit.
//!
//! Lesions are represented as center keypoints on multi-scale feature grids:
//! each ground-truth box labels the grid cells inside a positive cube around
//! its centroid, positives regress stride-encoded offsets to the true box, and
//! the classification loss mixes focal negatives with Gaussian-weighted
//! cross-entropy positives. The crate covers the full pipeline: volume IO and
//! resampling, crop tiling, ground-truth assignment (anchor-free and an
//! anchor-based baseline), losses with analytic gradients, a small 3D
//! U-structure network trained from scratch, 3D NMS, sliding-window assembly,
//! and FROC evaluation, plus a deterministic synthetic-volume generator so the
//! whole loop runs end-to-end on desk-scale data.
//!
//! The data-parallel inner loops use rayon when the default `parallel` feature
//! is enabled and fall back to plain sequential loops without it. All parallel
//! work is partitioned so every output element is produced by exactly one
//! task with a fixed-order inner accumulation, so results are bit-identical
//! across thread counts and across the two execution modes.

pub mod annotations;
pub mod assignment;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod parallel;
pub mod postprocess;
pub mod predict;
pub mod synth;
pub mod tiling;
pub mod train;
pub mod volume;

pub use annotations::{Annotation, BoxXyzd};
pub use error::{Error, Result};
pub use volume::Volume;

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar element type for network and loss arithmetic. Training runs in
/// `f32` (matching the checkpoint payload format); gradient-check tests
/// instantiate `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn as_f64(self) -> f64;
    fn cast(v: f64) -> Self;
}

impl Real for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn cast(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn cast(v: f64) -> Self {
        v
    }
}
