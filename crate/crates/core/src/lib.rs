//! Uncertainty-aware C-arm landmark positioning on a synthetic anatomy
//! simulator.
//!
//! The numerical core ([`tensor`], [`regressor`], [`losses`], [`conformal`],
//! [`eval`]) is generic over [`Real`] (`f32` or `f64`); the simulator works in
//! `f64`. The aliases below fix the scalar to `f64`.

// `!(x > 0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod anatomy;
pub mod conformal;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod navigation;
pub mod pipeline;
pub mod regressor;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use anatomy::{LandmarkId, Patient, Point, SkeletonTemplate, LANDMARKS};
pub use error::{Error, ErrorClass, Result};
pub use navigation::PathSpec;
pub use pipeline::PipelineConfig;
pub use sampler::{Pose, Sample};
pub use scalar::Real;

pub type Matrix = tensor::Matrix<f64>;
pub type Mlp = tensor::Mlp<f64>;
pub type AdamW = tensor::AdamW<f64>;
pub type Regressor = regressor::Regressor<f64>;
pub type GaussianPrediction = regressor::GaussianPrediction<f64>;
pub type McdEstimate = regressor::McdEstimate<f64>;
pub type CalibrationTable = conformal::CalibrationTable<f64>;
pub type PredictionRegion = conformal::PredictionRegion<f64>;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Mlp32 = tensor::Mlp<f32>;
pub type Regressor32 = regressor::Regressor<f32>;
pub type CalibrationTable32 = conformal::CalibrationTable<f32>;
