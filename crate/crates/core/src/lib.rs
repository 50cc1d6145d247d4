//! Open-world product attribute mining from a handful of seed values.
//!
//! The pipeline segments product titles into candidate values by probing a
//! masked language model, fine-tunes the encoder so that values of the same
//! attribute embed close together, and then groups candidates into attribute
//! clusters with density clustering backed by a classifier, iterating on its
//! own confident predictions.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision used by the command-line pipeline.

pub mod corpus;
pub mod discovery;
pub mod encoder;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod seeding;
pub mod segmenter;
pub mod trainer;
mod error;
mod parallel;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type of the end-to-end pipeline.
pub type Real = f32;

/// Tiny encoder at pipeline precision.
pub type Encoder = encoder::TinyEncoder<Real>;
/// Classification head at pipeline precision.
pub type Head = encoder::ClassifierHead<Real>;
/// Double-precision encoder, used where results are compared to oracles.
pub type Encoder64 = encoder::TinyEncoder<f64>;
