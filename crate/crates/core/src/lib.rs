#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Leaky integrate-and-fire networks trained with backpropagation, feedback
//! alignment, direct feedback alignment and augmented direct feedback
//! alignment, where the last may use an arbitrary backward nonlinearity.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`.

pub mod backward;
pub mod dataset;
pub mod config;
pub mod error;
pub mod ga;
pub mod lif;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod sweep;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;
pub use trainer::Mechanism;

pub type LifParams = lif::LifParams<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type InitStats = topology::InitStats<f64>;
pub type NetworkState = topology::NetworkState<f64>;
pub type BackwardFnSpec = backward::BackwardFnSpec<f64>;
pub type CorrelationConfig = backward::CorrelationConfig<f64>;
pub type Dataset = dataset::Dataset<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;
