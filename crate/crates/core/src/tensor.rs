//! Tensor aliases and small shape/validity helpers.
//!
//! Feature payloads are stored single-precision (matching the on-disk
//! format); all statistics, activations and gradients are computed and
//! held in double precision.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Per-snippet feature block laid out `[videos, snippets, channels]`.
pub type FeatureTensor = Array3<f32>;

/// Per-snippet score or prediction grid laid out `[videos, snippets]`.
pub type ScoreGrid = Array2<f64>;

/// Widen a single-precision feature tensor for double-precision math.
pub fn to_f64(x: ArrayView3<'_, f32>) -> Array3<f64> {
    x.mapv(f64::from)
}

pub fn ensure_finite3(x: ArrayView3<'_, f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteFeature)
    }
}

pub fn ensure_finite2(x: ArrayView2<'_, f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteFeature)
    }
}

pub fn ensure_same_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
