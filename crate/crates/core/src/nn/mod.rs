//! Minimal dense network engine: matrices, a reverse-mode tape, MLPs,
//! group max-pooling, Adam and finite-difference checks. Everything is `f64`.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;
mod tape;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, finite_difference_check_guarded, FdReport, KinkCrossed};
pub use matrix::Matrix;
pub use mlp::{init_params, mlp_forward, MlpParams, MlpSpec, MlpVars, PARAM_FORMAT_VERSION};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("max pool group {0} is empty")]
    EmptyGroup(usize),
    #[error("invalid MLP dims {0:?}: need >= 2 entries, all >= 1")]
    BadSpec(Vec<usize>),
    #[error("unsupported parameter format_version {0}")]
    FormatVersion(u32),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, expected: String, actual: String) -> Self {
        NnError::ShapeMismatch {
            op,
            expected,
            actual,
        }
    }
}

/// Concatenates tensors into one flat vector.
pub fn flatten(tensors: &[&Matrix]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Inverse of [`flatten`]; `flat` must have exactly the total length.
pub fn unflatten_into(tensors: &mut [&mut Matrix], flat: &[f64]) {
    let total: usize = tensors.iter().map(|t| t.data().len()).sum();
    assert_eq!(total, flat.len(), "flat parameter length");
    let mut offset = 0;
    for t in tensors.iter_mut() {
        let n = t.data().len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}
