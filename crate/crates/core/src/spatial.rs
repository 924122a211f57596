//! Station geometry and the exponential covariogram of the latent field.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Station;

/// Mean Earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Ridge added to the diagonal when a covariance fails to factor.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Euclidean distance on planar coordinates in km.
    #[default]
    Planar,
    /// Haversine distance on `(lat, lon)` in degrees, reported in km.
    Geographic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: DMatrix<f64>,
    metric: Metric,
}

impl DistanceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

fn haversine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
    let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn pairwise_distances(stations: &[Station], metric: Metric) -> Result<DistanceMatrix> {
    if stations.is_empty() {
        return Err(Error::InvalidParameter("no stations".into()));
    }
    if metric == Metric::Geographic {
        for s in stations {
            let [lat, lon] = s.coord;
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(Error::InvalidParameter(format!(
                    "station `{}` has invalid geographic coordinates ({lat}, {lon})",
                    s.id
                )));
            }
        }
    }
    let n = stations.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (stations[i].coord, stations[j].coord);
            let v = match metric {
                Metric::Planar => (a[0] - b[0]).hypot(a[1] - b[1]),
                Metric::Geographic => haversine(a, b),
            };
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(DistanceMatrix { d, metric })
}

/// Unit-variance innovation covariance `Sigma_eta = exp(-D / theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationCovariance {
    sigma: DMatrix<f64>,
}

impl InnovationCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.sigma
    }

    /// Cholesky factor, retrying once with a `JITTER` ridge.
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        crate::linalg::cholesky_with_jitter(&self.sigma, "innovation covariance")
    }
}

pub fn exponential_covariance(d: &DistanceMatrix, theta: f64) -> Result<InnovationCovariance> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("range theta = {theta} must be positive")));
    }
    Ok(InnovationCovariance { sigma: d.d.map(|x| (-x / theta).exp()) })
}

/// Elementwise derivative of `exp(-D / theta)` with respect to `theta`.
pub fn exponential_covariance_dtheta(d: &DistanceMatrix, theta: f64) -> DMatrix<f64> {
    d.d.map(|x| x / (theta * theta) * (-x / theta).exp())
}
