use thiserror::Error;

use crate::types::Violation;

/// Errors raised by the HDGC library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {}", format_violations(.0))]
    InvalidDataset(Vec<Violation>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column `{0}` has zero variance over observed cells")]
    ZeroVariance(String),

    #[error("all stations were removed by the missing-rate filter")]
    AllStationsRemoved,

    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("matrix is not positive definite: {context}")]
    NotPositiveDefinite { context: String },

    #[error("station `{0}` carries no information for its calibration coefficient")]
    UninformativeStation(String),

    #[error("non-positive denominator in {0} update")]
    NonPositiveDenominator(&'static str),

    #[error("log-likelihood decreased by {decrease:e} at EM iteration {iteration}")]
    NonMonotone { iteration: usize, decrease: f64 },

    #[error("range search failed: objective is non-finite at every simplex vertex")]
    RangeSearch,

    #[error("unknown station `{0}`")]
    UnknownStation(String),

    #[error("stations `{0}` and `{1}` share no common period")]
    NoCommonPeriod(String, String),

    #[error("requested {k} clusters from {n} stations")]
    TooManyClusters { k: usize, n: usize },

    #[error("no period has an estimate for every clustered station")]
    NoCompletePeriod,

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("no usable cells in window")]
    EmptyWindow,

    #[error("no replicates requested")]
    NoReplicates,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
