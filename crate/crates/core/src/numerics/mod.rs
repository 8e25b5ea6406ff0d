//! Dense `f64` kernels with hand-written gradients.

pub mod counter;
mod grad;
pub mod half;
mod matrix;
mod ops;
mod rng;

pub use grad::{fd_grad, relative_error};
pub use matrix::{dot, matmul, matmul_nt, matmul_tn, Matrix};
pub use ops::{
    inv_rms, rmsnorm, rmsnorm_backward, sigmoid, silu, silu_grad, softmax_in_place, softmax_rows,
};
pub use rng::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data of length {len} does not fill a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
}
