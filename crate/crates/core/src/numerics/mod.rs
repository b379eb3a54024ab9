//! Differentiable dense-array substrate.
//!
//! All model computation is expressed through [`Tape`] operations on 64-bit
//! floats. [`grad_check`] compares tape gradients against central finite
//! differences, and [`archive`] stores named tensors on disk.

pub mod archive;
mod gemm;
mod gradcheck;
pub mod opsuite;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a single-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Indices of the `k` largest scores, highest first.
///
/// Equal scores keep ascending index order, so the result is deterministic.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>, NumericsError> {
    if k == 0 || k > scores.len() {
        return Err(NumericsError::InvalidArgument(format!(
            "topk: k={k} must lie in [1, {}]",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps the smaller index first among ties.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    Ok(idx)
}
