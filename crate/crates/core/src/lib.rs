//! Brain-vision alignment with language anchoring, end to end:
//! uncertainty-weighted semantic fusion, cross-modal interaction
//! matrices aligned by symmetric KL, contrastive training with a
//! two-stage freeze/adapter schedule, and an N-way retrieval harness.
//!
//! Every numeric path is generic over the scalar ([`scalar::Real`]):
//! training runs in `f32`, gradient verification reruns the identical
//! code in `f64`.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod sla;
pub mod sup;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::DenseArray;
pub use scalar::{real, Real};

/// Single-precision array, the training representation.
pub type Array32 = DenseArray<f32>;
/// Double-precision array, used by verification oracles.
pub type Array64 = DenseArray<f64>;
/// Tape recording in training precision.
pub type Tape32 = numerics::Tape<f32>;
/// Tape recording in verification precision.
pub type Tape64 = numerics::Tape<f64>;
