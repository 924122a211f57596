//! Information matrix of the marginal likelihood from innovation-form
//! derivative recursions, and the standard errors it implies.
//!
//! For every scalar parameter the derivatives of the predicted state, its
//! covariance, the gain, the innovations and their covariances are carried
//! forward alongside a single stored filter pass. Missing observations are
//! handled on the reduced observation equation, exactly as in the filter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kalman::{filter_with, FilterOutput};
use crate::linalg::{cholesky_with_jitter, symmetrize};
use crate::spatial::{exponential_covariance, exponential_covariance_dtheta};
use crate::types::{Dataset, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Beta(usize),
    Alpha(usize),
    Sigma2,
    G,
    Theta,
}

/// Fixed ordering `(beta_1..beta_k, alpha_1..alpha_n, sigma2, g, theta)`
/// of the scalar parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamIndexMap {
    kinds: Vec<ParamKind>,
    names: Vec<String>,
}

impl ParamIndexMap {
    pub fn new(d: &Dataset) -> Self {
        let mut kinds = Vec::new();
        let mut names = Vec::new();
        for (j, c) in d.covariate_names.iter().enumerate() {
            kinds.push(ParamKind::Beta(j));
            names.push(format!("beta[{c}]"));
        }
        for (s, st) in d.stations.stations.iter().enumerate() {
            kinds.push(ParamKind::Alpha(s));
            names.push(format!("alpha[{}]", st.id));
        }
        kinds.extend([ParamKind::Sigma2, ParamKind::G, ParamKind::Theta]);
        names.extend(["sigma2", "g", "theta"].map(String::from));
        Self { kinds, names }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        self.kinds[i]
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, kind: ParamKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    pub fn value(&self, p: &ModelParams, i: usize) -> f64 {
        match self.kinds[i] {
            ParamKind::Beta(j) => p.beta[j],
            ParamKind::Alpha(s) => p.alpha[s],
            ParamKind::Sigma2 => p.sigma2,
            ParamKind::G => p.g,
            ParamKind::Theta => p.theta,
        }
    }

    /// Copy of `p` with parameter `i` shifted by `h`. The initial-state
    /// prior is left unchanged.
    pub fn perturbed(&self, p: &ModelParams, i: usize, h: f64) -> ModelParams {
        let mut q = p.clone();
        match self.kinds[i] {
            ParamKind::Beta(j) => q.beta[j] += h,
            ParamKind::Alpha(s) => q.alpha[s] += h,
            ParamKind::Sigma2 => q.sigma2 += h,
            ParamKind::G => q.g += h,
            ParamKind::Theta => q.theta += h,
        }
        q
    }
}

/// Derivatives of the innovations and their covariances with respect to
/// one parameter; `[t - 1]` holds time `t`, restricted to observed rows.
#[derive(Debug, Clone)]
pub struct InnovationDerivatives {
    pub d_innovation: Vec<DVector<f64>>,
    pub d_innovation_cov: Vec<DMatrix<f64>>,
}

fn propagate(
    d: &Dataset,
    p: &ModelParams,
    f: &FilterOutput,
    kind: ParamKind,
    d_sigma_eta: &DMatrix<f64>,
) -> Result<InnovationDerivatives> {
    let n = d.n();
    let g = p.g;
    let dg = if kind == ParamKind::G { 1.0 } else { 0.0 };
    let ds2 = if kind == ParamKind::Sigma2 { 1.0 } else { 0.0 };
    let dalpha = |s: usize| if kind == ParamKind::Alpha(s) { 1.0 } else { 0.0 };
    let dbeta = |j: usize| if kind == ParamKind::Beta(j) { 1.0 } else { 0.0 };

    let mut dz_prev = DVector::<f64>::zeros(n);
    let mut dp_prev = DMatrix::<f64>::zeros(n, n);
    let mut out = InnovationDerivatives {
        d_innovation: Vec::with_capacity(f.steps.len()),
        d_innovation_cov: Vec::with_capacity(f.steps.len()),
    };

    for (t, step) in f.steps.iter().enumerate() {
        let (z_prev, p_prev) = f.filtered(t);
        let dzp = z_prev * dg + &dz_prev * g;
        let mut dpp = p_prev * (2.0 * g * dg) + &dp_prev * (g * g);
        if kind == ParamKind::Theta {
            dpp += d_sigma_eta;
        }

        let obs = &step.observed;
        let m = obs.len();
        if m == 0 {
            out.d_innovation.push(DVector::zeros(0));
            out.d_innovation_cov.push(DMatrix::zeros(0, 0));
            dz_prev = dzp;
            dp_prev = dpp;
            continue;
        }

        let a: Vec<f64> = obs.iter().map(|&s| p.alpha[s]).collect();
        let da: Vec<f64> = obs.iter().map(|&s| dalpha(s)).collect();
        let x = &d.covariates[t];
        let zp = &step.z_pred;
        let pp = &step.p_pred;

        let d_eps = DVector::from_fn(m, |i, _| {
            let s = obs[i];
            let xb: f64 = (0..d.k()).map(|j| x[(s, j)] * dbeta(j)).sum();
            -xb - da[i] * zp[s] - a[i] * dzp[s]
        });
        let mut d_sig = DMatrix::from_fn(m, m, |i, j| {
            let (si, sj) = (obs[i], obs[j]);
            da[i] * pp[(si, sj)] * a[j] + a[i] * dpp[(si, sj)] * a[j] + a[i] * pp[(si, sj)] * da[j]
        });
        for i in 0..m {
            d_sig[(i, i)] += ds2;
        }

        let chol = cholesky_with_jitter(&step.innovation_cov, &format!("innovation covariance at t={}", t + 1))?;
        let k = &step.gain;
        // d(P A') - K dSigma, then right-multiplied by Sigma^{-1}
        let dpa = DMatrix::from_fn(n, m, |r, j| dpp[(r, obs[j])] * a[j] + pp[(r, obs[j])] * da[j]);
        let dk = chol.solve(&(dpa - k * &d_sig).transpose()).transpose();

        let dzf = &dzp + &dk * &step.innovation + k * &d_eps;
        let sk = &step.innovation_cov * k.transpose();
        let mut dpf = &dpp - &dk * &sk - k * &d_sig * k.transpose() - sk.transpose() * dk.transpose();
        symmetrize(&mut dpf);

        out.d_innovation.push(d_eps);
        out.d_innovation_cov.push(d_sig);
        dz_prev = dzf;
        dp_prev = dpf;
    }
    Ok(out)
}

struct Prepared {
    index: ParamIndexMap,
    filter: FilterOutput,
    d_sigma_eta: DMatrix<f64>,
}

fn prepare(d: &Dataset, p: &ModelParams) -> Result<Prepared> {
    p.check(d.n(), d.k())?;
    let dist = d.distances()?;
    let sigma_eta = exponential_covariance(&dist, p.theta)?.into_matrix();
    Ok(Prepared {
        index: ParamIndexMap::new(d),
        filter: filter_with(d, p, &sigma_eta)?,
        d_sigma_eta: exponential_covariance_dtheta(&dist, p.theta),
    })
}

/// Analytic derivatives of the innovations and their covariances with
/// respect to parameter `i` of [`ParamIndexMap::new`].
pub fn innovation_derivatives(d: &Dataset, p: &ModelParams, i: usize) -> Result<InnovationDerivatives> {
    let prep = prepare(d, p)?;
    if i >= prep.index.len() {
        return Err(Error::InvalidParameter(format!("parameter index {i} out of range")));
    }
    propagate(d, p, &prep.filter, prep.index.kind(i), &prep.d_sigma_eta)
}

#[derive(Debug, Clone)]
pub struct InfoMatrixResult {
    pub index: ParamIndexMap,
    pub j: DMatrix<f64>,
    /// Contribution of the innovation-derivative term alone.
    pub j_innovation: DMatrix<f64>,
    /// `J^{-1}`; absent when `J` is singular.
    pub v: Option<DMatrix<f64>>,
    pub se: Option<DVector<f64>>,
    /// Parameters spanning the numerical null space of `J`.
    pub unidentified: Vec<String>,
}

impl InfoMatrixResult {
    pub fn se_of(&self, kind: ParamKind) -> Option<f64> {
        let i = self.index.index_of(kind)?;
        self.se.as_ref().map(|s| s[i])
    }
}

const NULL_RATIO: f64 = 1e-10;
const NULL_LOADING: f64 = 0.1;

pub fn information_matrix(d: &Dataset, p: &ModelParams, exec: Execution) -> Result<InfoMatrixResult> {
    let prep = prepare(d, p)?;
    let kinds = prep.index.kinds().to_vec();
    let derivs: Vec<InnovationDerivatives> = exec
        .map(&kinds, |kind: &ParamKind| propagate(d, p, &prep.filter, *kind, &prep.d_sigma_eta))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let np = kinds.len();
    let mut j_eps = DMatrix::<f64>::zeros(np, np);
    let mut j_cov = DMatrix::<f64>::zeros(np, np);
    for (t, step) in prep.filter.steps.iter().enumerate() {
        let m = step.observed.len();
        if m == 0 {
            continue;
        }
        let chol = cholesky_with_jitter(&step.innovation_cov, &format!("innovation covariance at t={}", t + 1))?;
        let u: Vec<DVector<f64>> = derivs.iter().map(|dv| chol.solve(&dv.d_innovation[t])).collect();
        let b: Vec<DMatrix<f64>> = derivs.iter().map(|dv| chol.solve(&dv.d_innovation_cov[t])).collect();
        let tr: Vec<f64> = b.iter().map(|x| x.trace()).collect();
        for i in 0..np {
            for k in i..np {
                let e = derivs[i].d_innovation[t].dot(&u[k]);
                // tr(B_i B_k) = sum_ab B_i[a,b] B_k[b,a]
                let bb = b[i].component_mul(&b[k].transpose()).sum();
                let c = 0.5 * bb + 0.25 * tr[i] * tr[k];
                j_eps[(i, k)] += e;
                j_cov[(i, k)] += c;
                if k != i {
                    j_eps[(k, i)] += e;
                    j_cov[(k, i)] += c;
                }
            }
        }
    }
    let j: DMatrix<f64> = &j_eps + &j_cov;

    let eig = j.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a: f64, v: &f64| a.max(v.abs()));
    let mut unidentified: Vec<usize> = Vec::new();
    for (e, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lmax == 0.0 || lambda <= NULL_RATIO * lmax {
            let v = eig.eigenvectors.column(e);
            for i in 0..np {
                if v[i].abs() > NULL_LOADING && !unidentified.contains(&i) {
                    unidentified.push(i);
                }
            }
        }
    }
    unidentified.sort_unstable();
    let unidentified: Vec<String> = unidentified.iter().map(|&i| prep.index.name(i).to_string()).collect();

    let (v, se) = if unidentified.is_empty() {
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        let mut v = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
        symmetrize(&mut v);
        let se = v.diagonal().map(|x| x.max(0.0).sqrt());
        (Some(v), Some(se))
    } else {
        (None, None)
    };

    Ok(InfoMatrixResult { index: prep.index, j, j_innovation: j_eps, v, se, unidentified })
}

/// Worst relative discrepancy between the analytic derivatives of the
/// innovations (and their covariances) with respect to parameter `i` and
/// central finite differences with step `1e-6 (1 + |phi_i|)`.
pub fn derivative_check(d: &Dataset, p: &ModelParams, i: usize) -> Result<f64> {
    let analytic = innovation_derivatives(d, p, i)?;
    let index = ParamIndexMap::new(d);
    let h = 1e-6 * (1.0 + index.value(p, i).abs());
    let fp = crate::kalman::run_filter(d, &index.perturbed(p, i, h))?;
    let fm = crate::kalman::run_filter(d, &index.perturbed(p, i, -h))?;

    let mut worst: f64 = 0.0;
    let mut scale_e: f64 = 0.0;
    let mut scale_s: f64 = 0.0;
    let mut err_e: f64 = 0.0;
    let mut err_s: f64 = 0.0;
    for t in 0..fp.steps.len() {
        let fd_e = (&fp.steps[t].innovation - &fm.steps[t].innovation) / (2.0 * h);
        let fd_s = (&fp.steps[t].innovation_cov - &fm.steps[t].innovation_cov) / (2.0 * h);
        if fd_e.is_empty() {
            continue;
        }
        scale_e = scale_e.max(fd_e.amax());
        scale_s = scale_s.max(fd_s.amax());
        err_e = err_e.max((&analytic.d_innovation[t] - &fd_e).amax());
        err_s = err_s.max((&analytic.d_innovation_cov[t] - &fd_s).amax());
    }
    for (err, scale) in [(err_e, scale_e), (err_s, scale_s)] {
        worst = worst.max(err / (scale + 1e-8));
    }
    Ok(worst)
}
