//! Maximum-likelihood estimation by EM.
//!
//! The E-step runs the filter and smoother and collects the smoothed
//! moments. The M-step is a single conditional-maximization sweep over
//! `alpha -> beta -> sigma2 -> g -> theta`, each block maximizing the
//! expected complete-data log-likelihood given the blocks already updated.
//! The initial-state prior `(mu0, Sigma0)` is held fixed throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{run_filter, run_smoother, SmootherOutput};
use crate::linalg::{cholesky_with_jitter, log_det};
use crate::optim::NelderMead;
use crate::spatial::exponential_covariance;
use crate::types::{Dataset, ModelParams};

pub const SIGMA2_FLOOR: f64 = 1e-12;
pub const MONOTONE_TOL: f64 = 1e-8;

pub const INIT_ALPHA: f64 = 0.5;
pub const INIT_SIGMA2: f64 = 0.1;
pub const INIT_G: f64 = 0.2;
pub const INIT_THETA: f64 = 100.0;

/// Settings for the Nelder-Mead search over `log(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaSearch {
    pub lower: f64,
    pub upper: f64,
    /// Initial simplex step in log-units.
    pub simplex_scale: f64,
    pub max_evals: usize,
    pub tol: f64,
}

impl Default for ThetaSearch {
    fn default() -> Self {
        Self { lower: 1e-2, upper: 1e4, simplex_scale: 0.25, max_evals: 200, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSignPolicy {
    #[default]
    EnforcePositive,
    Free,
}

/// Plain EM, or squared extrapolation of the EM map (each iteration is then
/// a cycle of two EM steps, an extrapolation and a stabilizing EM step,
/// falling back to the plain double step unless the extrapolation improves
/// the likelihood).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Acceleration {
    None,
    #[default]
    Squarem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum LoglikTolerance {
    Absolute(f64),
    /// Multiple of the current `|loglik|`.
    Relative(f64),
}

impl LoglikTolerance {
    fn threshold(&self, loglik: f64) -> f64 {
        match *self {
            LoglikTolerance::Absolute(v) => v,
            LoglikTolerance::Relative(v) => v * loglik.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Threshold on the Euclidean norm of the change in `(beta, alpha, sigma2, g, theta)`.
    pub param_tol: f64,
    pub loglik_tol: LoglikTolerance,
    pub theta_search: ThetaSearch,
    pub alpha_sign_policy: AlphaSignPolicy,
    pub acceleration: Acceleration,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            param_tol: 1e-4,
            loglik_tol: LoglikTolerance::Relative(1e-6),
            theta_search: ThetaSearch::default(),
            alpha_sign_policy: AlphaSignPolicy::EnforcePositive,
            acceleration: Acceleration::Squarem,
        }
    }
}

impl FitConfig {
    pub fn check(&self) -> Result<()> {
        let tol = match self.loglik_tol {
            LoglikTolerance::Absolute(v) | LoglikTolerance::Relative(v) => v,
        };
        let s = &self.theta_search;
        if self.max_iter == 0 || !(self.param_tol > 0.0) || !(tol > 0.0) {
            return Err(Error::InvalidConfig("iterations and tolerances must be positive".into()));
        }
        if !(s.lower > 0.0 && s.upper > s.lower && s.simplex_scale > 0.0 && s.tol > 0.0) {
            return Err(Error::InvalidConfig("range search needs 0 < lower < upper and positive steps".into()));
        }
        Ok(())
    }
}

/// Smoothed moments and the sums the M-step is built from.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `sum_t z_{t-1} z_{t-1}' + P_{t-1}` over `t = 1..=T`.
    pub s00: DMatrix<f64>,
    /// `sum_t z_t z_{t-1}' + P_{t,t-1}`.
    pub s10: DMatrix<f64>,
    /// `sum_t z_t z_t' + P_t`.
    pub s11: DMatrix<f64>,
    /// `sum_t Omega_t`, each embedded on its observed rows, at the E-step parameters.
    pub omega_sum: DMatrix<f64>,
    pub smoothed: SmootherOutput,
    pub t_len: usize,
    pub observed_cells: usize,
}

fn fixed_effect(d: &Dataset, beta: &DVector<f64>, s: usize, t: usize) -> f64 {
    let x = &d.covariates[t];
    (0..beta.len()).map(|j| x[(s, j)] * beta[j]).sum()
}

/// Embedded `sum_t Omega_t` for parameters `p` and smoothed moments `sm`.
fn omega_sum(d: &Dataset, p: &ModelParams, sm: &SmootherOutput) -> DMatrix<f64> {
    let n = d.n();
    let mut out = DMatrix::zeros(n, n);
    for t in 0..d.t_len() {
        let obs = d.observed_at(t);
        let (z, pc) = (&sm.means[t + 1], &sm.covs[t + 1]);
        let r: Vec<f64> =
            obs.iter().map(|&s| d.y[(s, t)] - fixed_effect(d, &p.beta, s, t) - p.alpha[s] * z[s]).collect();
        for (i, &a) in obs.iter().enumerate() {
            for (j, &b) in obs.iter().enumerate() {
                out[(a, b)] += r[i] * r[j] + p.alpha[a] * pc[(a, b)] * p.alpha[b];
            }
        }
    }
    out
}

pub fn e_step(d: &Dataset, p: &ModelParams) -> Result<(SufficientStats, f64)> {
    let f = run_filter(d, p)?;
    let sm = run_smoother(p, &f)?;
    let n = d.n();
    let t_len = d.t_len();
    let mut s00 = DMatrix::zeros(n, n);
    let mut s10 = DMatrix::zeros(n, n);
    let mut s11 = DMatrix::zeros(n, n);
    for t in 1..=t_len {
        let (z1, z0) = (&sm.means[t], &sm.means[t - 1]);
        s11 += z1 * z1.transpose() + &sm.covs[t];
        s00 += z0 * z0.transpose() + &sm.covs[t - 1];
        s10 += z1 * z0.transpose() + &sm.lag_one[t - 1];
    }
    let omega = omega_sum(d, p, &sm);
    Ok((
        SufficientStats { s00, s10, s11, omega_sum: omega, smoothed: sm, t_len, observed_cells: d.observed_count() },
        f.loglik,
    ))
}

/// Per-station ratio update of the calibration coefficients, summing only
/// over the times each station is observed.
pub fn update_alpha(stats: &SufficientStats, d: &Dataset, p: &ModelParams) -> Result<DVector<f64>> {
    let n = d.n();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for t in 0..d.t_len() {
        let (z, pc) = (&stats.smoothed.means[t + 1], &stats.smoothed.covs[t + 1]);
        for s in 0..n {
            if d.observed[(s, t)] {
                num[s] += z[s] * (d.y[(s, t)] - fixed_effect(d, &p.beta, s, t));
                den[s] += z[s] * z[s] + pc[(s, s)];
            }
        }
    }
    (0..n)
        .map(|s| {
            if den[s] > 0.0 {
                Ok(num[s] / den[s])
            } else {
                Err(Error::UninformativeStation(d.stations.stations[s].id.clone()))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// Names of design columns that are (numerically) linear combinations of
/// earlier columns, given the Gram matrix `X'X`.
fn collinear_columns(xtx: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut kept: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for j in 0..xtx.nrows() {
        let diag = xtx[(j, j)];
        let resid = if kept.is_empty() {
            diag
        } else {
            let gram = crate::linalg::select(xtx, &kept, &kept);
            let cross = DVector::from_iterator(kept.len(), kept.iter().map(|&i| xtx[(i, j)]));
            match gram.cholesky() {
                Some(c) => diag - cross.dot(&c.solve(&cross)),
                None => 0.0,
            }
        };
        if diag > 0.0 && resid > 1e-10 * diag {
            kept.push(j);
        } else {
            out.push(names[j].clone());
        }
    }
    out
}

/// Pooled least squares of `target(s, t)` on the covariates over observed cells.
fn pooled_ols(d: &Dataset, target: impl Fn(usize, usize) -> f64) -> Result<DVector<f64>> {
    let k = d.k();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for t in 0..d.t_len() {
        let x = &d.covariates[t];
        for s in 0..d.n() {
            if !d.observed[(s, t)] {
                continue;
            }
            let row = x.row(s);
            xtx += row.transpose() * row;
            xty += row.transpose() * target(s, t);
        }
    }
    let bad = collinear_columns(&xtx, &d.covariate_names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let c = xtx.cholesky().ok_or_else(|| Error::RankDeficient(d.covariate_names.clone()))?;
    Ok(c.solve(&xty))
}

/// Generalized least-squares update of `beta` given `alpha`; with
/// `Sigma_eps = sigma2 I` the weights cancel and this is pooled OLS of
/// `y_t - A z_t^T` on `X_t`.
pub fn update_beta(stats: &SufficientStats, d: &Dataset, p: &ModelParams) -> Result<DVector<f64>> {
    let sm = &stats.smoothed;
    pooled_ols(d, |s, t| d.y[(s, t)] - p.alpha[s] * sm.means[t + 1][s])
}

pub fn update_sigma2(stats: &SufficientStats, d: &Dataset, p: &ModelParams) -> f64 {
    if stats.observed_cells == 0 {
        return p.sigma2;
    }
    let trace = omega_sum(d, p, &stats.smoothed).trace();
    let v = trace / stats.observed_cells as f64;
    if v < SIGMA2_FLOOR {
        log::warn!("measurement variance {v:e} floored at {SIGMA2_FLOOR:e}");
        SIGMA2_FLOOR
    } else {
        v
    }
}

pub fn update_g(stats: &SufficientStats, d: &Dataset, p: &ModelParams) -> Result<f64> {
    let chol = exponential_covariance(&d.distances()?, p.theta)?.cholesky()?;
    let num = chol.solve(&stats.s10).trace();
    let den = chol.solve(&stats.s00).trace();
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::NonPositiveDenominator("g"))
    }
}

/// State part of the expected `-2 log-likelihood` as a function of the range:
/// `T log|S| + tr[S^{-1}(S11 - g S10 - g S10' + g^2 S00)]` with `S = Sigma_eta(theta)`.
pub fn theta_objective(stats: &SufficientStats, d: &Dataset, g: f64, theta: f64) -> Result<f64> {
    theta_objective_with(stats, &d.distances()?, g, theta)
}

fn state_scatter(stats: &SufficientStats, g: f64) -> DMatrix<f64> {
    &stats.s11 - (&stats.s10 + stats.s10.transpose()) * g + &stats.s00 * (g * g)
}

fn theta_objective_with(
    stats: &SufficientStats,
    dist: &crate::spatial::DistanceMatrix,
    g: f64,
    theta: f64,
) -> Result<f64> {
    let m = state_scatter(stats, g);
    objective_for_scatter(&m, stats.t_len, dist, theta)
}

fn objective_for_scatter(
    m: &DMatrix<f64>,
    t_len: usize,
    dist: &crate::spatial::DistanceMatrix,
    theta: f64,
) -> Result<f64> {
    let chol = exponential_covariance(dist, theta)?.cholesky()?;
    Ok(t_len as f64 * log_det(&chol) + chol.solve(m).trace())
}

/// Minimizes [`theta_objective`] over `log(theta)` with Nelder-Mead; the
/// incumbent `p.theta` is kept unless the search strictly improves on it.
pub fn update_theta(stats: &SufficientStats, d: &Dataset, p: &ModelParams, search: &ThetaSearch) -> Result<f64> {
    let dist = d.distances()?;
    let m = state_scatter(stats, p.g);
    let objective = |theta: f64| objective_for_scatter(&m, stats.t_len, &dist, theta).unwrap_or(f64::INFINITY);
    let incumbent = objective(p.theta);
    let nm = NelderMead { scale: search.simplex_scale, max_evals: search.max_evals, tol: search.tol };
    let (lo, hi) = (search.lower.ln(), search.upper.ln());
    let start = p.theta.ln().clamp(lo, hi);
    match nm.minimize(|x| objective(x[0].exp()), &[start], &[lo], &[hi]) {
        Some(best) if best.value < incumbent => Ok(best.x[0].exp()),
        Some(_) => Ok(p.theta),
        None if incumbent.is_finite() => Ok(p.theta),
        None => Err(Error::RangeSearch),
    }
}

/// Expected complete-data `-2 log-likelihood` (additive `2 pi` constants
/// dropped) at parameters `p`, under the moments in `stats`.
pub fn q_function(stats: &SufficientStats, d: &Dataset, p: &ModelParams) -> Result<f64> {
    let sm = &stats.smoothed;
    let obs_part = stats.observed_cells as f64 * p.sigma2.ln() + omega_sum(d, p, sm).trace() / p.sigma2;
    let state_part = theta_objective(stats, d, p.g, p.theta)?;
    let prior = cholesky_with_jitter(&p.sigma0, "initial-state covariance")?;
    let dz = &sm.means[0] - &p.mu0;
    let prior_scatter = &sm.covs[0] + &dz * dz.transpose();
    let prior_part = log_det(&prior) + prior.solve(&prior_scatter).trace();
    Ok(obs_part + state_part + prior_part)
}

/// Least-squares start: pooled OLS `beta`, `alpha = 0.5`, `sigma2 = 0.1`,
/// `g = 0.2`, `theta = 100` and the matching stationary prior.
pub fn init_params(d: &Dataset) -> Result<ModelParams> {
    let beta = pooled_ols(d, |s, t| d.y[(s, t)])?;
    ModelParams::with_stationary_prior(
        d,
        beta,
        DVector::from_element(d.n(), INIT_ALPHA),
        INIT_SIGMA2,
        INIT_G,
        INIT_THETA,
    )
}

/// One conditional-maximization sweep.
pub fn m_step(stats: &SufficientStats, d: &Dataset, p: &ModelParams, cfg: &FitConfig) -> Result<ModelParams> {
    let mut next = p.clone();
    next.alpha = update_alpha(stats, d, &next)?;
    next.beta = update_beta(stats, d, &next)?;
    next.sigma2 = update_sigma2(stats, d, &next);
    next.g = update_g(stats, d, &next)?;
    next.theta = update_theta(stats, d, &next, &cfg.theta_search)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Marginal log-likelihood at the start and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub smoothed: SmootherOutput,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the initial log-likelihood")
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Unconstrained coordinates `(beta, alpha, ln sigma2, g, ln theta)` used
/// for extrapolation.
fn to_free(p: &ModelParams) -> Vec<f64> {
    let mut v: Vec<f64> = p.beta.iter().chain(p.alpha.iter()).copied().collect();
    v.extend([p.sigma2.ln(), p.g, p.theta.ln()]);
    v
}

fn from_free(v: &[f64], base: &ModelParams, search: &ThetaSearch) -> ModelParams {
    let k = base.beta.len();
    let n = base.alpha.len();
    let mut p = base.clone();
    p.beta = DVector::from_column_slice(&v[..k]);
    p.alpha = DVector::from_column_slice(&v[k..k + n]);
    p.sigma2 = v[k + n].exp().max(SIGMA2_FLOOR);
    p.g = v[k + n + 1];
    p.theta = v[k + n + 2].exp().clamp(search.lower, search.upper);
    p
}

struct Point {
    params: ModelParams,
    stats: SufficientStats,
    loglik: f64,
}

fn em_map(d: &Dataset, from: &Point, cfg: &FitConfig) -> Result<Point> {
    let params = m_step(&from.stats, d, &from.params, cfg)?;
    let (stats, loglik) = e_step(d, &params)?;
    Ok(Point { params, stats, loglik })
}

/// Extrapolation from a squared-iteration cycle `x0 -> x1 -> x2`, followed
/// by one stabilizing EM step. Returns `None` when the extrapolated point
/// is unusable or does not improve on `x2`.
fn extrapolate(d: &Dataset, x0: &Point, x1: &Point, x2: &Point, cfg: &FitConfig) -> Option<Point> {
    let (u0, u1, u2) = (to_free(&x0.params), to_free(&x1.params), to_free(&x2.params));
    let r: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = (0..u0.len()).map(|i| u2[i] - 2.0 * u1[i] + u0[i]).collect();
    let (nr, nv) = (r.iter().map(|x| x * x).sum::<f64>().sqrt(), v.iter().map(|x| x * x).sum::<f64>().sqrt());
    if !(nv > 0.0) {
        return None;
    }
    let step = -(nr / nv).max(1.0);
    if step == -1.0 {
        return None;
    }
    let u: Vec<f64> = (0..u0.len()).map(|i| u0[i] - 2.0 * step * r[i] + step * step * v[i]).collect();
    if !u.iter().all(|x| x.is_finite()) {
        return None;
    }
    let params = from_free(&u, &x0.params, &cfg.theta_search);
    let (stats, loglik) = e_step(d, &params).ok()?;
    let jumped = Point { params, stats, loglik };
    let settled = em_map(d, &jumped, cfg).ok()?;
    (settled.loglik >= x2.loglik).then_some(settled)
}

pub fn fit(d: &Dataset, cfg: &FitConfig, init: Option<&ModelParams>) -> Result<FitResult> {
    cfg.check()?;
    let params = match init {
        Some(p) => p.clone(),
        None => init_params(d)?,
    };
    params.check(d.n(), d.k())?;
    if params.g.abs() >= 1.0 {
        return Err(Error::InvalidParameter(format!("starting g = {} is not stationary", params.g)));
    }

    let (stats, loglik) = e_step(d, &params)?;
    let mut current = Point { params, stats, loglik };
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    let monotone = |iteration: usize, before: f64, after: f64| {
        if after < before - MONOTONE_TOL {
            Err(Error::NonMonotone { iteration, decrease: before - after })
        } else {
            Ok(())
        }
    };

    while iterations < cfg.max_iter {
        iterations += 1;
        let x1 = em_map(d, &current, cfg)?;
        monotone(iterations, current.loglik, x1.loglik)?;
        let step = distance(&x1.params.psi(), &current.params.psi());
        let dll = (x1.loglik - current.loglik).abs();
        if step < cfg.param_tol && dll < cfg.loglik_tol.threshold(x1.loglik) {
            trace.push(x1.loglik);
            current = x1;
            converged = true;
            break;
        }
        let next = match cfg.acceleration {
            Acceleration::None => x1,
            Acceleration::Squarem => {
                let x2 = em_map(d, &x1, cfg)?;
                monotone(iterations, x1.loglik, x2.loglik)?;
                extrapolate(d, &current, &x1, &x2, cfg).unwrap_or(x2)
            }
        };
        trace.push(next.loglik);
        current = next;
    }

    let Point { mut params, stats, .. } = current;
    let mut smoothed = stats.smoothed;
    if cfg.alpha_sign_policy == AlphaSignPolicy::EnforcePositive && params.alpha.mean() < 0.0 {
        params.alpha.neg_mut();
        params.mu0.neg_mut();
        smoothed.negate_means();
    }
    Ok(FitResult { params, loglik_trace: trace, iterations, converged, smoothed })
}
