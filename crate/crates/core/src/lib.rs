//! Image restoration with a prior-query conditioned transformer.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tape`], [`ops`]),
//! the restoration network and its prior learning module ([`arch`]), training
//! objectives ([`losses`]), synthetic degradations ([`degrade`]), quality
//! metrics ([`metrics`]) and the two-stage training pipeline ([`pipeline`]).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`,
//! which is what the pipeline and checkpoints use.

pub mod adam;
pub mod arch;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Var;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type ParameterStore = params::ParameterStore<f64>;
pub type AdamState = adam::AdamState<f64>;
