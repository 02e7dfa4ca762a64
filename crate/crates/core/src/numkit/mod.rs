//! Dense numerics used throughout the crate: vectors and row-major matrices,
//! the seeded random stream, small tanh MLPs with hand-written reverse mode,
//! Adam with inverse-time learning-rate decay, and central finite differences.

mod adam;
mod fd;
mod linalg;
mod mlp;
mod rng;

pub use adam::AdamState;
pub use fd::finite_diff_grad;
pub use linalg::{axpy, dot, norm, Mat};
pub use mlp::{Activation, Dense, Mlp, MlpCache};
pub use rng::Rng;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at coordinate {index} in {op}")]
    NonFinite { op: &'static str, index: usize },
}

pub(crate) fn check_len(op: &'static str, expected: usize, got: usize) -> Result<(), NumError> {
    if expected != got {
        return Err(NumError::Shape { op, expected, got });
    }
    Ok(())
}
