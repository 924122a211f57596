//! Dataset and parameter representations shared by every other module.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{exponential_covariance, pairwise_distances, DistanceMatrix, Metric};

/// A single monitoring station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    /// Planar `(x, y)` in km, or geographic `(lat, lon)` in degrees.
    pub coord: [f64; 2],
    pub group: Option<String>,
}

impl Station {
    pub fn new(id: impl Into<String>, coord: [f64; 2]) -> Self {
        Self { id: id.into(), coord, group: None }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// The monitoring network together with the coordinate system its
/// coordinates are expressed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSet {
    pub stations: Vec<Station>,
    pub metric: Metric,
}

impl StationSet {
    pub fn new(stations: Vec<Station>, metric: Metric) -> Self {
        Self { stations, metric }
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.stations.iter().map(|s| s.id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }
}

/// A problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoStations,
    DuplicateStation(String),
    NonFiniteCoordinate(String),
    ResponseShape { rows: usize, cols: usize, stations: usize, times: usize },
    MaskShape { rows: usize, cols: usize },
    CovariateSteps { found: usize, expected: usize },
    CovariateShape { time: usize, rows: usize, cols: usize, stations: usize, columns: usize },
    NonFiniteResponse { station: String, time: usize },
    NonFiniteCovariate { station: String, time: usize, column: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStations => write!(f, "no stations"),
            Violation::DuplicateStation(id) => write!(f, "duplicate station id `{id}`"),
            Violation::NonFiniteCoordinate(id) => write!(f, "station `{id}` has a non-finite coordinate"),
            Violation::ResponseShape { rows, cols, stations, times } => {
                write!(f, "response matrix is {rows}x{cols}, expected {stations}x{times}")
            }
            Violation::MaskShape { rows, cols } => {
                write!(f, "observation mask is {rows}x{cols}, does not match the response")
            }
            Violation::CovariateSteps { found, expected } => {
                write!(f, "{found} covariate matrices for {expected} time steps")
            }
            Violation::CovariateShape { time, rows, cols, stations, columns } => {
                write!(f, "covariate matrix at t={time} is {rows}x{cols}, expected {stations}x{columns}")
            }
            Violation::NonFiniteResponse { station, time } => {
                write!(f, "non-finite observed response at station `{station}`, t={time}")
            }
            Violation::NonFiniteCovariate { station, time, column } => {
                write!(f, "non-finite covariate `{column}` at station `{station}`, t={time}")
            }
        }
    }
}

/// Responses, missing-data mask and covariates for `n` stations over `T`
/// time steps.
///
/// `y` is `n x T`; `observed[(s, t)]` is false where `y(s, t)` is missing
/// (the stored value is then never read). `covariates[t]` is the `n x k`
/// design matrix at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stations: StationSet,
    pub y: DMatrix<f64>,
    pub observed: DMatrix<bool>,
    pub covariates: Vec<DMatrix<f64>>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and rejects it if any invariant is violated.
    pub fn new(
        stations: StationSet,
        y: DMatrix<f64>,
        observed: DMatrix<bool>,
        covariates: Vec<DMatrix<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let d = Self { stations, y, observed, covariates, covariate_names };
        let violations = validate_dataset(&d);
        if violations.is_empty() {
            Ok(d)
        } else {
            Err(Error::InvalidDataset(violations))
        }
    }

    /// Fully observed dataset without covariates.
    pub fn without_covariates(stations: StationSet, y: DMatrix<f64>) -> Result<Self> {
        let (n, t) = y.shape();
        let covariates = vec![DMatrix::zeros(n, 0); t];
        Self::new(stations, y, DMatrix::from_element(n, t, true), covariates, Vec::new())
    }

    pub fn n(&self) -> usize {
        self.stations.len()
    }

    pub fn t_len(&self) -> usize {
        self.y.ncols()
    }

    pub fn k(&self) -> usize {
        self.covariate_names.len()
    }

    /// Indices of stations observed at time `t` (0-based).
    pub fn observed_at(&self, t: usize) -> Vec<usize> {
        (0..self.n()).filter(|&s| self.observed[(s, t)]).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Per-station fraction of missing responses.
    pub fn missing_rates(&self) -> Vec<f64> {
        let t = self.t_len().max(1) as f64;
        (0..self.n()).map(|s| self.observed.row(s).iter().filter(|&&o| !o).count() as f64 / t).collect()
    }

    /// Overall fraction of missing response cells.
    pub fn missing_rate(&self) -> f64 {
        let total = self.n() * self.t_len();
        if total == 0 {
            0.0
        } else {
            1.0 - self.observed_count() as f64 / total as f64
        }
    }

    pub fn distances(&self) -> Result<DistanceMatrix> {
        pairwise_distances(&self.stations.stations, self.stations.metric)
    }

    /// Restricts the dataset to the given station indices, in that order.
    pub fn select_stations(&self, keep: &[usize]) -> Dataset {
        let stations =
            StationSet::new(keep.iter().map(|&i| self.stations.stations[i].clone()).collect(), self.stations.metric);
        let y = self.y.select_rows(keep);
        let observed = DMatrix::from_fn(keep.len(), self.t_len(), |r, c| self.observed[(keep[r], c)]);
        let covariates = self.covariates.iter().map(|x| x.select_rows(keep)).collect();
        Dataset { stations, y, observed, covariates, covariate_names: self.covariate_names.clone() }
    }

    /// Restricts the dataset to time steps `start..end`.
    pub fn select_times(&self, start: usize, end: usize) -> Dataset {
        let len = end - start;
        Dataset {
            stations: self.stations.clone(),
            y: self.y.columns(start, len).into_owned(),
            observed: self.observed.columns(start, len).into_owned(),
            covariates: self.covariates[start..end].to_vec(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Lists every violated dataset invariant.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = d.stations.len();
    if n == 0 {
        out.push(Violation::NoStations);
    }
    let mut seen = HashSet::new();
    for s in &d.stations.stations {
        if !seen.insert(s.id.as_str()) {
            out.push(Violation::DuplicateStation(s.id.clone()));
        }
        if !s.coord.iter().all(|c| c.is_finite()) {
            out.push(Violation::NonFiniteCoordinate(s.id.clone()));
        }
    }
    let times = d.covariates.len();
    let (rows, cols) = d.y.shape();
    if rows != n || cols != times {
        out.push(Violation::ResponseShape { rows, cols, stations: n, times });
    }
    if d.observed.shape() != d.y.shape() {
        let (rows, cols) = d.observed.shape();
        out.push(Violation::MaskShape { rows, cols });
    }
    if d.covariates.len() != cols {
        out.push(Violation::CovariateSteps { found: d.covariates.len(), expected: cols });
    }
    let k = d.covariate_names.len();
    for (t, x) in d.covariates.iter().enumerate() {
        if x.nrows() != n || x.ncols() != k {
            out.push(Violation::CovariateShape { time: t, rows: x.nrows(), cols: x.ncols(), stations: n, columns: k });
        }
    }
    if !out.is_empty() {
        return out;
    }
    let id = |s: usize| d.stations.stations[s].id.clone();
    for t in 0..cols {
        for s in 0..n {
            if !d.observed[(s, t)] {
                continue;
            }
            if !d.y[(s, t)].is_finite() {
                out.push(Violation::NonFiniteResponse { station: id(s), time: t });
            }
            for j in 0..k {
                if !d.covariates[t][(s, j)].is_finite() {
                    out.push(Violation::NonFiniteCovariate {
                        station: id(s),
                        time: t,
                        column: d.covariate_names[j].clone(),
                    });
                }
            }
        }
    }
    out
}

/// Location and scale of one standardized column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScale {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Record produced by [`standardize`]; allows exact inversion.
///
/// The response is standardized with one pooled mean and sd over all
/// observed cells, so that relative station scales (and hence the
/// calibration coefficients) survive the transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub response: ColumnScale,
    pub covariates: Vec<(String, ColumnScale)>,
}

impl Standardization {
    /// Maps a standardized dataset back to the original scale.
    pub fn invert(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        for t in 0..d.t_len() {
            for s in 0..d.n() {
                if d.observed[(s, t)] {
                    out.y[(s, t)] = self.response.invert(d.y[(s, t)]);
                }
            }
            for (j, (_, scale)) in self.covariates.iter().enumerate() {
                for s in 0..d.n() {
                    out.covariates[t][(s, j)] = scale.invert(d.covariates[t][(s, j)]);
                }
            }
        }
        out
    }
}

fn observed_scale(values: impl Iterator<Item = f64>, name: &str) -> Result<ColumnScale> {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    Ok(ColumnScale { mean, sd })
}

/// Centres and scales the response and every covariate column over the
/// observed cells (sample sd, denominator `N - 1`). Missing cells are left
/// untouched.
pub fn standardize(d: &Dataset) -> Result<(Dataset, Standardization)> {
    let cells: Vec<(usize, usize)> =
        (0..d.t_len()).flat_map(|t| (0..d.n()).map(move |s| (s, t))).filter(|&(s, t)| d.observed[(s, t)]).collect();
    let response = observed_scale(cells.iter().map(|&(s, t)| d.y[(s, t)]), "y")?;
    let mut covariates = Vec::with_capacity(d.k());
    for (j, name) in d.covariate_names.iter().enumerate() {
        let scale = observed_scale(cells.iter().map(|&(s, t)| d.covariates[t][(s, j)]), name)?;
        covariates.push((name.clone(), scale));
    }

    let mut out = d.clone();
    for &(s, t) in &cells {
        out.y[(s, t)] = response.apply(d.y[(s, t)]);
    }
    for (t, x) in out.covariates.iter_mut().enumerate() {
        for (j, (_, scale)) in covariates.iter().enumerate() {
            for s in 0..d.n() {
                x[(s, j)] = scale.apply(d.covariates[t][(s, j)]);
            }
        }
    }
    Ok((out, Standardization { response, covariates }))
}

/// Drops stations whose missing-response fraction exceeds `threshold`.
pub fn filter_stations_by_missing(d: &Dataset, threshold: f64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("missing threshold {threshold} outside [0, 1]")));
    }
    let keep: Vec<usize> =
        d.missing_rates().iter().enumerate().filter(|(_, &r)| r <= threshold).map(|(i, _)| i).collect();
    if keep.is_empty() {
        return Err(Error::AllStationsRemoved);
    }
    Ok(d.select_stations(&keep))
}

/// Parameters of the model plus the (fixed) initial-state prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub sigma2: f64,
    pub g: f64,
    pub theta: f64,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl ModelParams {
    /// Parameters with the stationary AR(1) prior `N(0, Sigma_eta / (1 - g^2))`
    /// for the initial state.
    pub fn with_stationary_prior(
        d: &Dataset,
        beta: DVector<f64>,
        alpha: DVector<f64>,
        sigma2: f64,
        g: f64,
        theta: f64,
    ) -> Result<Self> {
        let (mu0, sigma0) = stationary_prior(&d.distances()?, g, theta)?;
        let p = Self { beta, alpha, sigma2, g, theta, mu0, sigma0 };
        p.check(d.n(), d.k())?;
        Ok(p)
    }

    pub fn calibration(&self) -> CalibrationMatrix {
        CalibrationMatrix::new(self.alpha.clone())
    }

    /// The estimated parameter set flattened as `(beta, alpha, sigma2, g, theta)`.
    pub fn psi(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.beta.len() + self.alpha.len() + 3);
        v.extend(self.beta.iter());
        v.extend(self.alpha.iter());
        v.extend([self.sigma2, self.g, self.theta]);
        v
    }

    pub fn check(&self, n: usize, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.alpha.len() != n || self.mu0.len() != n || self.sigma0.shape() != (n, n) {
            return bad(format!("dimensions do not match {n} stations"));
        }
        if self.beta.len() != k {
            return bad(format!("beta has {} entries, expected {k}", self.beta.len()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 = {} must be positive", self.sigma2));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad(format!("theta = {} must be positive", self.theta));
        }
        if !self.g.is_finite() || !self.alpha.iter().chain(self.beta.iter()).all(|v| v.is_finite()) {
            return bad("non-finite coefficient".into());
        }
        Ok(())
    }
}

/// Stationary prior `(0, Sigma_eta / (1 - g^2))` of the AR(1) field.
pub fn stationary_prior(distances: &DistanceMatrix, g: f64, theta: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if g.abs() >= 1.0 {
        return Err(Error::InvalidParameter(format!("stationary prior requires |g| < 1, got {g}")));
    }
    let cov = exponential_covariance(distances, theta)?;
    let n = distances.len();
    Ok((DVector::zeros(n), cov.matrix() / (1.0 - g * g)))
}

/// Diagonal calibration matrix `diag(alpha_1, ..., alpha_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMatrix {
    alpha: DVector<f64>,
}

impl CalibrationMatrix {
    pub fn new(alpha: DVector<f64>) -> Self {
        Self { alpha }
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.alpha.component_mul(v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.alpha)
    }
}
