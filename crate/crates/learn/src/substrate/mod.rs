//! Rank-2 tensors with tape-based reverse-mode differentiation, a parameter
//! store and the Adam optimiser.

mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use params::{AdamConfig, ParamId, ParamStore, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubstrateError {
    #[error("shape mismatch in {0}")]
    ShapeMismatch(String),
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NotScalarLoss { rows: usize, cols: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Central finite-difference check of `f` at `x`.
///
/// `f` maps a flat input to a scalar and must also return the analytic
/// gradient. Returns the largest relative error over all coordinates; the
/// denominator is floored at `1e-6` so exact zeros do not divide by zero.
pub fn finite_difference_error(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
) -> f64 {
    let (_, analytic) = f(x);
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe).0;
        probe[i] = x[i] - h;
        let down = f(&probe).0;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
