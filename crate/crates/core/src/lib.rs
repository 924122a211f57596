//! Hidden dynamic geostatistical calibration (HDGC) model.
//!
//! Observations follow `y_t = X_t beta + A z_t + eps_t` with a diagonal
//! calibration matrix `A = diag(alpha)` and a latent AR(1) field
//! `z_t = g z_{t-1} + eta_t` whose innovations have exponential spatial
//! correlation `exp(-d / theta)`. The crate provides exact filtering and
//! smoothing with missing data, EM estimation, information-matrix
//! standard errors, a simulator for replicated recovery studies, and
//! tools to flag stations whose calibration coefficient is anomalously low.

// `!(x > 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
pub mod em;
pub mod error;
pub mod exec;
pub mod infomatrix;
pub mod kalman;
pub mod linalg;
pub mod optim;
pub mod simulate;
pub mod spatial;
pub mod types;

pub use em::{fit, init_params, FitConfig, FitResult};
pub use error::{Error, Result};
pub use exec::Execution;
pub use kalman::{run_filter, run_smoother, FilterOutput, SmootherOutput};
pub use spatial::Metric;
pub use types::{Dataset, ModelParams, Station, StationSet};
