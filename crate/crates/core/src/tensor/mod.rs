//! Dense `f64` arrays and a reverse-mode differentiation tape.
//!
//! Values live in [`DenseArray`]. Differentiable computation happens on a
//! [`Tape`]: leaves are registered with [`Tape::param`] (trainable) or
//! [`Tape::constant`], every operation on a [`Var`] appends a node, and
//! [`Tape::backward`] replays the nodes in reverse. [`Var::detach`] copies a
//! value into a fresh constant leaf, which is how gradient flow is cut.

mod array;
mod tape;

use thiserror::Error;

pub use array::DenseArray;
pub use tape::{concat, mac_count, reset_mac_count, Tape, Unary, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("backward error: {0}")]
    Backward(String),
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(x: &DenseArray, h: f64, mut f: impl FnMut(&DenseArray) -> f64) -> DenseArray {
    let mut probe = x.clone();
    let mut grad = DenseArray::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe);
        probe.values_mut()[i] = orig - h;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        grad.values_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
