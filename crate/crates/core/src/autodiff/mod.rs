//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! The engine is generic over [`Real`] so the same network code runs in `f32`
//! for training and in `f64` when gradients are checked against finite
//! differences. Every forward and backward value is checked for NaN/Inf.

mod adam;
mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use graph::{Graph, Var, LOG_FLOOR};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Central-difference gradient of a scalar function: `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>, AutodiffError>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T, AutodiffError>,
{
    if !(h > T::zero()) {
        return Err(AutodiffError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
