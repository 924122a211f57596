//! Test-only oracles: brute-force joint-Gaussian computations over the
//! stacked latent path and observations, and random instance generators.
#![allow(dead_code, clippy::needless_range_loop)]

use hdgc::spatial::{exponential_covariance, Metric};
use hdgc::{Dataset, ModelParams, Station, StationSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct JointGaussian {
    /// Observed cells `(station, time index 0..T-1)` in stacking order.
    pub cells: Vec<(usize, usize)>,
    pub y: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub cov_y: DMatrix<f64>,
    pub mean_z: DVector<f64>,
    pub cov_z: DMatrix<f64>,
    /// `Cov(z, y)`.
    pub cov_zy: DMatrix<f64>,
    pub n: usize,
    pub t_len: usize,
}

impl JointGaussian {
    /// Stacks `z_0..z_T` (block `t` at rows `t n..(t+1) n`) and every observed
    /// `y(s, t)`, and builds their joint mean and covariance directly from
    /// the model definition.
    pub fn build(d: &Dataset, p: &ModelParams) -> Self {
        let n = d.n();
        let t_len = d.t_len();
        let dist = d.distances().unwrap();
        let seta = exponential_covariance(&dist, p.theta).unwrap().into_matrix();

        // marginal covariances V_t and means
        let mut v = vec![p.sigma0.clone()];
        let mut m = vec![p.mu0.clone()];
        for t in 1..=t_len {
            v.push(&v[t - 1] * (p.g * p.g) + &seta);
            m.push(&m[t - 1] * p.g);
        }
        let dim = n * (t_len + 1);
        let mut cov_z = DMatrix::zeros(dim, dim);
        let mut mean_z = DVector::zeros(dim);
        for t in 0..=t_len {
            mean_z.rows_mut(t * n, n).copy_from(&m[t]);
            for s in 0..=t {
                // Cov(z_t, z_s) = g^{t-s} V_s
                let block = &v[s] * p.g.powi((t - s) as i32);
                cov_z.view_mut((t * n, s * n), (n, n)).copy_from(&block);
                cov_z.view_mut((s * n, t * n), (n, n)).copy_from(&block.transpose());
            }
        }

        let cells: Vec<(usize, usize)> =
            (0..t_len).flat_map(|t| (0..n).map(move |s| (s, t))).filter(|&(s, t)| d.observed[(s, t)]).collect();
        let nobs = cells.len();
        let zi = |s: usize, t: usize| (t + 1) * n + s;
        let mut y = DVector::zeros(nobs);
        let mut mean_y = DVector::zeros(nobs);
        let mut cov_zy = DMatrix::zeros(dim, nobs);
        let mut cov_y = DMatrix::zeros(nobs, nobs);
        for (i, &(s, t)) in cells.iter().enumerate() {
            y[i] = d.y[(s, t)];
            let xb: f64 = (0..d.k()).map(|j| d.covariates[t][(s, j)] * p.beta[j]).sum();
            mean_y[i] = xb + p.alpha[s] * mean_z[zi(s, t)];
            for r in 0..dim {
                cov_zy[(r, i)] = p.alpha[s] * cov_z[(r, zi(s, t))];
            }
            for (j, &(s2, t2)) in cells.iter().enumerate() {
                cov_y[(i, j)] = p.alpha[s] * p.alpha[s2] * cov_z[(zi(s, t), zi(s2, t2))];
            }
            cov_y[(i, i)] += p.sigma2;
        }
        Self { cells, y, mean_y, cov_y, mean_z, cov_z, cov_zy, n, t_len }
    }

    pub fn loglik(&self) -> f64 {
        let k = self.y.len();
        if k == 0 {
            return 0.0;
        }
        let c = self.cov_y.clone().cholesky().unwrap();
        let r = &self.y - &self.mean_y;
        let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (logdet + r.dot(&c.solve(&r)) + k as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Posterior mean and covariance of the stacked latent path.
    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        if self.y.is_empty() {
            return (self.mean_z.clone(), self.cov_z.clone());
        }
        let c = self.cov_y.clone().cholesky().unwrap();
        let r = &self.y - &self.mean_y;
        let mean = &self.mean_z + &self.cov_zy * c.solve(&r);
        let cov = &self.cov_z - &self.cov_zy * c.solve(&self.cov_zy.transpose());
        (mean, cov)
    }

    pub fn block(&self, m: &DMatrix<f64>, t: usize, s: usize) -> DMatrix<f64> {
        m.view((t * self.n, s * self.n), (self.n, self.n)).into_owned()
    }

    pub fn mean_at(&self, m: &DVector<f64>, t: usize) -> DVector<f64> {
        m.rows(t * self.n, self.n).into_owned()
    }
}

/// Random instance with planar stations in a 5 x 5 km box, `k` covariates,
/// each response cell missing with probability `missing`.
pub fn random_instance(seed: u64, n: usize, t_len: usize, k: usize, missing: f64) -> (Dataset, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations: Vec<Station> = (0..n)
        .map(|i| Station::new(format!("S{i}"), [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)]))
        .collect();
    let set = StationSet::new(stations, Metric::Planar);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let y = DMatrix::from_fn(n, t_len, |_, _| normal());
    let covariates: Vec<DMatrix<f64>> = (0..t_len).map(|_| DMatrix::from_fn(n, k, |_, _| normal())).collect();
    let mut observed = DMatrix::from_element(n, t_len, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for v in observed.iter_mut() {
        *v = rng.random::<f64>() >= missing;
    }
    let names = (0..k).map(|j| format!("x{j}")).collect();
    let d = Dataset::new(set, y, observed, covariates, names).unwrap();

    let sign = |r: &mut ChaCha8Rng| if r.random::<bool>() { 1.0 } else { -1.0 };
    let alpha = DVector::from_fn(n, |_, _| sign(&mut rng) * rng.random_range(0.3..1.5));
    let beta = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let g = rng.random_range(-0.9..0.9);
    let theta = rng.random_range(0.5..5.0);
    let sigma2 = rng.random_range(0.05..1.0);
    let mut p = ModelParams::with_stationary_prior(&d, beta, alpha, sigma2, g, theta).unwrap();
    p.mu0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    (d, p)
}

/// Same as [`random_instance`] but with responses drawn from the model at
/// the returned parameters.
pub fn model_instance(seed: u64, n: usize, t_len: usize, k: usize, missing: f64) -> (Dataset, ModelParams) {
    let (mut d, p) = random_instance(seed, n, t_len, k, missing);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let seta = exponential_covariance(&d.distances().unwrap(), p.theta).unwrap().into_matrix();
    let l = seta.cholesky().unwrap().l();
    let l0 = p.sigma0.clone().cholesky().unwrap().l();
    let mut draw = |m: usize| DVector::<f64>::from_fn(m, |_, _| rng.sample(StandardNormal));
    let mut z = &p.mu0 + &l0 * draw(n);
    for t in 0..d.t_len() {
        z = &z * p.g + &l * draw(n);
        let noise = draw(n) * p.sigma2.sqrt();
        let xb = &d.covariates[t] * &p.beta;
        let yt = xb + p.alpha.component_mul(&z) + noise;
        d.y.set_column(t, &yt);
    }
    (d, p)
}
