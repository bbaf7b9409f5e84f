//! Anomaly detection by inferring the diffusion time of an input.
//!
//! A variance-exploding diffusion adds Gaussian noise of growing variance
//! `sigma_t^2` to clean data. Given a point, the posterior over `t` (or over
//! `sigma_t^2`) is concentrated at small `t` for points near the data and at
//! large `t` for points far from it, so the posterior location is an anomaly
//! score. This crate provides four estimators of it:
//!
//! | method        | type                          | score                            |
//! |---------------|-------------------------------|----------------------------------|
//! | `analytic`    | [`AnalyticDetector`]          | exact posterior mean of sigma²   |
//! | `nonparam`    | [`NonParamDetector`]          | inverse-Gamma mode from k-NN     |
//! | `invgamma`    | [`InvGammaModel`]             | mode `b/(a+1)` of a learned scale|
//! | `categorical` | [`CategoricalModel`]          | expected timestep bin            |
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`.
//!
//! ```
//! use dtpm::data::{split, SplitMode};
//! use dtpm::synthetic::TwoClusterConfig;
//! use dtpm::{Detector, Method, TrainConfig};
//!
//! let ds = TwoClusterConfig { inliers: 200, ..Default::default() }.generate::<f64>()?;
//! let sp = split(&ds, SplitMode::Semi, 0)?;
//! let cfg = TrainConfig { hidden: vec![32, 32], epochs: 5, lr: 1e-3, ..TrainConfig::default() };
//! let model = dtpm::train(Method::Categorical, &sp.train, sp.standardizer.clone(), &cfg)?;
//! let scores = model.score_standardized(&sp.test)?;
//! assert_eq!(scores.len(), sp.test.rows());
//! # Ok::<(), dtpm::Error>(())
//! ```

// NaN must fail range checks, so `!(x > 0)` is intended throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod mlp;
pub mod models;
pub mod neighbors;
pub mod posterior;
pub mod scalar;
pub mod schedule;
pub mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};
pub use evaluation::{run_benchmark, BenchSettings, EvalReport, Metrics};
pub use models::{
    denoise, train, DifferentiableDetector, Detector, Method, StopReason, TrainConfig, TrainedModel, Trajectory,
};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Mlp = mlp::Mlp<f64>;
pub type AdamState = mlp::AdamState<f64>;
pub type DiffusionSchedule = schedule::DiffusionSchedule<f64>;
pub type InverseGammaParams = posterior::InverseGammaParams<f64>;
pub type GridPosterior = posterior::GridPosterior<f64>;
pub type KnnIndex = neighbors::KnnIndex<f64>;
pub type Dataset = data::Dataset<f64>;
pub type DatasetSplit = data::DatasetSplit<f64>;
pub type InvGammaModel = models::InvGammaModel<f64>;
pub type CategoricalModel = models::CategoricalModel<f64>;
pub type AnalyticDetector = models::AnalyticDetector<f64>;
pub type NonParamDetector = models::NonParamDetector<f64>;
pub type Model = models::TrainedModel<f64>;

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Split = 1,
    Init = 2,
    Training = 3,
    RowCap = 4,
}

/// ChaCha8 generator for `(seed, stream)`; identical inputs give identical
/// sequences on every platform.
pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
