//! Differentiable operations recorded on a [`Tape`](crate::tape::Tape).

pub mod conv;
pub mod dense;
mod elementwise;
pub mod loss;
pub mod shape;

pub use conv::conv2d_forward;
pub use dense::{matmul, matmul_nt, matmul_tn};
