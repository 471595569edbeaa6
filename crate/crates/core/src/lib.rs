//! Federated learning across isolated data domains.
//!
//! Clients train a shared softmax model on private shards and release models
//! whose change from the global model is clipped and Gaussian-noised. The
//! coordinator combines them under a weighting policy, optionally through a
//! pairwise-masked secure sum, and evaluates the global model per domain
//! every round.
//!
//! The model math is generic over [`Scalar`] (`f32` or `f64`); the engine and
//! the wire format use `f64` through the aliases below.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod scalar;
pub mod secure_sum;
pub mod transport;

pub use scalar::Scalar;

/// Double-precision parameter vector; the unit exchanged between client and server.
pub type ParamVector = model::Params<f64>;
/// Single-precision parameter vector.
pub type ParamVectorF32 = model::Params<f32>;
/// Double-precision dataset.
pub type Dataset = model::Dataset<f64>;
/// Single-precision dataset.
pub type DatasetF32 = model::Dataset<f32>;
/// Double-precision example.
pub type Example = model::Example<f64>;
/// Single-precision example.
pub type ExampleF32 = model::Example<f32>;
