//! Exact Kalman filter, fixed-interval smoother and lag-one covariance
//! smoother for the calibration model, with missing observations handled
//! by dropping the unobserved rows of the observation equation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, log_det, symmetrize};
use crate::spatial::exponential_covariance;
use crate::types::{Dataset, ModelParams};

/// Filter quantities at one time step. Vectors and matrices indexed by
/// observation are restricted to the `observed` rows.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub observed: Vec<usize>,
    pub z_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub z_filt: DVector<f64>,
    pub p_filt: DMatrix<f64>,
    /// `n x m_t` gain `P A' Sigma_t^{-1}`.
    pub gain: DMatrix<f64>,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub z0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// `steps[t - 1]` holds time `t`, for `t = 1..=T`.
    pub steps: Vec<FilterStep>,
    pub loglik: f64,
}

impl FilterOutput {
    /// Filtered mean and covariance at time `t` (0 is the prior).
    pub fn filtered(&self, t: usize) -> (&DVector<f64>, &DMatrix<f64>) {
        if t == 0 {
            (&self.z0, &self.p0)
        } else {
            let s = &self.steps[t - 1];
            (&s.z_filt, &s.p_filt)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// `means[t] = z_t^T` for `t = 0..=T`.
    pub means: Vec<DVector<f64>>,
    /// `covs[t] = P_t^T` for `t = 0..=T`.
    pub covs: Vec<DMatrix<f64>>,
    /// `lag_one[t - 1] = P_{t,t-1}^T` for `t = 1..=T`.
    pub lag_one: Vec<DMatrix<f64>>,
}

impl SmootherOutput {
    pub(crate) fn negate_means(&mut self) {
        for m in &mut self.means {
            m.neg_mut();
        }
    }
}

pub fn run_filter(d: &Dataset, p: &ModelParams) -> Result<FilterOutput> {
    p.check(d.n(), d.k())?;
    let sigma_eta = exponential_covariance(&d.distances()?, p.theta)?.into_matrix();
    filter_with(d, p, &sigma_eta)
}

pub fn loglik(d: &Dataset, p: &ModelParams) -> Result<f64> {
    Ok(run_filter(d, p)?.loglik)
}

/// Filter with a precomputed innovation covariance.
pub(crate) fn filter_with(d: &Dataset, p: &ModelParams, sigma_eta: &DMatrix<f64>) -> Result<FilterOutput> {
    let n = d.n();
    let g = p.g;
    let mut steps = Vec::with_capacity(d.t_len());
    let mut loglik = 0.0;
    let mut z_prev = p.mu0.clone();
    let mut p_prev = p.sigma0.clone();

    for t in 0..d.t_len() {
        let z_pred = &z_prev * g;
        let mut p_pred = &p_prev * (g * g) + sigma_eta;
        symmetrize(&mut p_pred);

        let obs = d.observed_at(t);
        let m = obs.len();
        if m == 0 {
            steps.push(FilterStep {
                observed: obs,
                z_filt: z_pred.clone(),
                p_filt: p_pred.clone(),
                z_pred,
                p_pred,
                gain: DMatrix::zeros(n, 0),
                innovation: DVector::zeros(0),
                innovation_cov: DMatrix::zeros(0, 0),
            });
            z_prev = steps[t].z_filt.clone();
            p_prev = steps[t].p_filt.clone();
            continue;
        }

        let a_obs: Vec<f64> = obs.iter().map(|&s| p.alpha[s]).collect();
        // P A_o'  (n x m)
        let pa = DMatrix::from_fn(n, m, |i, j| p_pred[(i, obs[j])] * a_obs[j]);
        let mut sigma_t = DMatrix::from_fn(m, m, |i, j| a_obs[i] * pa[(obs[i], j)]);
        for i in 0..m {
            sigma_t[(i, i)] += p.sigma2;
        }
        symmetrize(&mut sigma_t);
        let x = &d.covariates[t];
        let innovation = DVector::from_fn(m, |i, _| {
            let s = obs[i];
            let xb: f64 = (0..d.k()).map(|j| x[(s, j)] * p.beta[j]).sum();
            d.y[(s, t)] - xb - a_obs[i] * z_pred[s]
        });

        let chol = cholesky_with_jitter(&sigma_t, &format!("innovation covariance at t={}", t + 1))?;
        let gain = chol.solve(&pa.transpose()).transpose();
        let z_filt = &z_pred + &gain * &innovation;
        let mut p_filt = &p_pred - &gain * pa.transpose();
        symmetrize(&mut p_filt);

        let quad = chol.solve(&innovation).dot(&innovation);
        loglik -= 0.5 * (log_det(&chol) + quad + m as f64 * (2.0 * PI).ln());

        z_prev = z_filt.clone();
        p_prev = p_filt.clone();
        steps.push(FilterStep {
            observed: obs,
            z_pred,
            p_pred,
            z_filt,
            p_filt,
            gain,
            innovation,
            innovation_cov: sigma_t,
        });
    }

    if !loglik.is_finite() {
        return Err(Error::NotPositiveDefinite { context: "non-finite log-likelihood".into() });
    }
    Ok(FilterOutput { z0: p.mu0.clone(), p0: p.sigma0.clone(), steps, loglik })
}

/// Fixed-interval smoother plus lag-one covariances.
pub fn run_smoother(p: &ModelParams, f: &FilterOutput) -> Result<SmootherOutput> {
    let t_len = f.steps.len();
    let n = f.z0.len();
    let g = p.g;
    let mut means = vec![DVector::zeros(n); t_len + 1];
    let mut covs = vec![DMatrix::zeros(n, n); t_len + 1];
    // gains[t - 1] = J_{t-1} = g P_{t-1}^{t-1} (P_t^{t-1})^{-1}
    let mut gains = vec![DMatrix::zeros(n, n); t_len];

    let (zt, pt) = f.filtered(t_len);
    means[t_len] = zt.clone();
    covs[t_len] = pt.clone();

    for t in (1..=t_len).rev() {
        let step = &f.steps[t - 1];
        let (zf, pf) = f.filtered(t - 1);
        let chol = nalgebra::Cholesky::new(step.p_pred.clone())
            .ok_or_else(|| Error::NotPositiveDefinite { context: format!("predicted covariance at t={t}") })?;
        let j = chol.solve(&(pf * g)).transpose();
        means[t - 1] = zf + &j * (&means[t] - &step.z_pred);
        let mut c = pf + &j * (&covs[t] - &step.p_pred) * j.transpose();
        symmetrize(&mut c);
        covs[t - 1] = c;
        gains[t - 1] = j;
    }

    let mut lag_one = vec![DMatrix::zeros(n, n); t_len];
    if t_len > 0 {
        let last = &f.steps[t_len - 1];
        let mut ka = DMatrix::<f64>::identity(n, n);
        for (j, &s) in last.observed.iter().enumerate() {
            for i in 0..n {
                ka[(i, s)] -= last.gain[(i, j)] * p.alpha[s];
            }
        }
        let (_, pf) = f.filtered(t_len - 1);
        lag_one[t_len - 1] = ka * pf * g;
        for t in (2..=t_len).rev() {
            let (_, pf) = f.filtered(t - 1);
            let jt = gains[t - 2].transpose();
            let inner = &lag_one[t - 1] - pf * g;
            lag_one[t - 2] = pf * &jt + &gains[t - 1] * inner * &jt;
        }
    }

    Ok(SmootherOutput { means, covs, lag_one })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::Metric;
    use crate::types::{Station, StationSet};

    fn scalar_dataset(y: &[f64]) -> Dataset {
        let st = StationSet::new(vec![Station::new("a", [0.0, 0.0])], Metric::Planar);
        Dataset::without_covariates(st, DMatrix::from_row_slice(1, y.len(), y)).unwrap()
    }

    fn scalar_params(g: f64) -> ModelParams {
        ModelParams {
            beta: DVector::zeros(0),
            alpha: DVector::from_element(1, 1.0),
            sigma2: 1.0,
            g,
            theta: 1.0,
            mu0: DVector::zeros(1),
            sigma0: DMatrix::identity(1, 1),
        }
    }

    #[test]
    fn scalar_conjugate_update() {
        let d = scalar_dataset(&[1.7]);
        let f = run_filter(&d, &scalar_params(0.0)).unwrap();
        assert!((f.steps[0].z_filt[0] - 0.85).abs() < 1e-15);
        assert!((f.steps[0].p_filt[(0, 0)] - 0.5).abs() < 1e-15);
        // y ~ N(0, 2)
        let expect = -0.5 * (2f64.ln() + 1.7 * 1.7 / 2.0 + (2.0 * PI).ln());
        assert!((f.loglik - expect).abs() < 1e-14);
    }

    #[test]
    fn all_missing_propagates_prior() {
        let mut d = scalar_dataset(&[1.0, 2.0, 3.0]);
        d.observed.fill(false);
        let f = run_filter(&d, &scalar_params(0.7)).unwrap();
        assert_eq!(f.loglik, 0.0);
        assert!(f.steps.iter().all(|s| s.z_filt[0] == 0.0));
    }

    #[test]
    fn smoother_base_and_zero_ar() {
        let d = scalar_dataset(&[0.3, -1.2, 0.8, 2.0]);
        let p = scalar_params(0.6);
        let f = run_filter(&d, &p).unwrap();
        let s = run_smoother(&p, &f).unwrap();
        assert_eq!(s.means[4], f.steps[3].z_filt);
        assert_eq!(s.covs[4], f.steps[3].p_filt);

        let p0 = scalar_params(0.0);
        let f0 = run_filter(&d, &p0).unwrap();
        let s0 = run_smoother(&p0, &f0).unwrap();
        for t in 1..=4 {
            assert_eq!(s0.means[t], f0.steps[t - 1].z_filt);
        }
    }
}
