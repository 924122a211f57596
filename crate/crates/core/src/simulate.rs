//! Synthetic data from the generative model and replicated recovery studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::em::{fit, FitConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::infomatrix::{information_matrix, ParamKind};
use crate::spatial::{exponential_covariance, Metric};
use crate::types::{Dataset, Station, StationSet};

/// Generative settings for a rows x cols grid of stations, numbered
/// row-major from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub rows: usize,
    pub cols: usize,
    /// Grid spacing in km.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    pub t_len: usize,
    /// Per-station calibration coefficients, row-major.
    pub alpha: Vec<f64>,
    pub g: f64,
    pub theta: f64,
    /// Measurement-error standard deviation.
    pub sigma: f64,
    /// Fixed effects; covariates are drawn i.i.d. standard normal.
    #[serde(default)]
    pub beta: Vec<f64>,
    /// Probability that a response cell is missing.
    #[serde(default)]
    pub missing_rate: f64,
    pub n_reps: usize,
    pub seed: u64,
    /// Also compute information-matrix standard errors for every replicate.
    #[serde(default)]
    pub standard_errors: bool,
}

fn default_spacing() -> f64 {
    1.0
}

impl ScenarioConfig {
    /// 3x3 unit grid with `g = 0.5`, `theta = 100`, `sigma = 0.1`, every
    /// `alpha = 0.8` except `alpha = 0.5` at the 1-based `biased` site.
    pub fn grid_bias(biased: usize, t_len: usize, n_reps: usize, seed: u64) -> Self {
        let mut alpha = vec![0.8; 9];
        alpha[biased - 1] = 0.5;
        Self {
            rows: 3,
            cols: 3,
            spacing: 1.0,
            t_len,
            alpha,
            g: 0.5,
            theta: 100.0,
            sigma: 0.1,
            beta: Vec::new(),
            missing_rate: 0.0,
            n_reps,
            seed,
            standard_errors: false,
        }
    }

    /// Biased site in the centre of the grid.
    pub fn scenario_one(t_len: usize, n_reps: usize, seed: u64) -> Self {
        Self::grid_bias(5, t_len, n_reps, seed)
    }

    /// Biased site at a corner of the grid.
    pub fn scenario_two(t_len: usize, n_reps: usize, seed: u64) -> Self {
        Self::grid_bias(3, t_len, n_reps, seed)
    }

    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rows == 0 || self.cols == 0 || self.t_len == 0 {
            return bad("grid and series length must be positive");
        }
        if self.alpha.len() != self.n() {
            return bad("alpha must have one entry per grid station");
        }
        if !(self.sigma >= 0.0) || !(self.theta > 0.0) || !(self.spacing > 0.0) {
            return bad("sigma must be non-negative, theta and spacing positive");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn stations(&self) -> StationSet {
        let stations = (0..self.n())
            .map(|i| {
                let (r, c) = (i / self.cols, i % self.cols);
                Station::new(format!("S{}", i + 1), [c as f64 * self.spacing, r as f64 * self.spacing])
            })
            .collect();
        StationSet::new(stations, Metric::Planar)
    }

    /// Names of the reported parameters: `beta_j`, `alpha_s`, `g`, `theta`, `sigma`.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..=self.beta.len()).map(|j| format!("beta_{j}")).collect();
        v.extend((1..=self.n()).map(|s| format!("alpha_{s}")));
        v.extend(["g", "theta", "sigma"].map(String::from));
        v
    }

    pub fn truth(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend(&self.alpha);
        v.extend([self.g, self.theta, self.sigma]);
        v
    }
}

/// A generated dataset together with its latent path `z_0..z_T`.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub latent: Vec<DVector<f64>>,
}

fn normal_vec(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Replicate `rep` of the scenario; deterministic in `(cfg.seed, rep)`.
pub fn simulate(cfg: &ScenarioConfig, rep: usize) -> Result<Simulated> {
    cfg.check()?;
    let stations = cfg.stations();
    let n = stations.len();
    let k = cfg.beta.len();
    let dist = crate::spatial::pairwise_distances(&stations.stations, Metric::Planar)?;
    let chol = exponential_covariance(&dist, cfg.theta)?.cholesky()?;
    let l = chol.l();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);

    let mut z =
        if cfg.g.abs() < 1.0 { &l * normal_vec(&mut rng, n) / (1.0 - cfg.g * cfg.g).sqrt() } else { DVector::zeros(n) };
    let mut latent = Vec::with_capacity(cfg.t_len + 1);
    latent.push(z.clone());

    let beta = DVector::from_column_slice(&cfg.beta);
    let alpha = DVector::from_column_slice(&cfg.alpha);
    let mut y = DMatrix::zeros(n, cfg.t_len);
    let mut observed = DMatrix::from_element(n, cfg.t_len, true);
    let mut covariates = Vec::with_capacity(cfg.t_len);
    for t in 0..cfg.t_len {
        z = &z * cfg.g + &l * normal_vec(&mut rng, n);
        let x = DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal));
        let eps = normal_vec(&mut rng, n) * cfg.sigma;
        let yt = &x * &beta + alpha.component_mul(&z) + eps;
        y.set_column(t, &yt);
        if cfg.missing_rate > 0.0 {
            for s in 0..n {
                observed[(s, t)] = rng.random::<f64>() >= cfg.missing_rate;
            }
        }
        covariates.push(x);
        latent.push(z.clone());
    }
    let names = (1..=k).map(|j| format!("x{j}")).collect();
    let dataset = Dataset::new(stations, y, observed, covariates, names)?;
    Ok(Simulated { dataset, latent })
}

pub fn generate(cfg: &ScenarioConfig, rep: usize) -> Result<Dataset> {
    simulate(cfg, rep).map(|s| s.dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    /// `None` with fewer than two successful replicates.
    pub sd: Option<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    /// In the order of [`ScenarioConfig::parameter_names`].
    pub estimates: Vec<f64>,
    pub standard_errors: Option<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub names: Vec<String>,
    pub summaries: Vec<ParameterSummary>,
    pub replicates: Vec<ReplicateOutcome>,
    pub failures: Vec<(usize, String)>,
}

impl RecoveryReport {
    pub fn summary(&self, name: &str) -> Option<&ParameterSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(self.replicates.iter().map(|r| r.estimates[i]).collect())
    }

    pub fn se_column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        self.replicates.iter().map(|r| r.standard_errors.as_ref().map(|s| s[i])).collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

fn fit_replicate(cfg: &ScenarioConfig, fitcfg: &FitConfig, rep: usize) -> Result<ReplicateOutcome> {
    let d = generate(cfg, rep)?;
    let r = fit(&d, fitcfg, None)?;
    let p = &r.params;
    let mut est: Vec<f64> = p.beta.iter().copied().collect();
    est.extend(p.alpha.iter());
    est.extend([p.g, p.theta, p.sigma2.sqrt()]);

    let standard_errors = if cfg.standard_errors {
        let info = information_matrix(&d, p, Execution::Sequential)?;
        info.se.as_ref().map(|_| {
            let mut se: Vec<f64> = (0..d.k()).map(|j| info.se_of(ParamKind::Beta(j)).unwrap()).collect();
            se.extend((0..d.n()).map(|s| info.se_of(ParamKind::Alpha(s)).unwrap()));
            se.push(info.se_of(ParamKind::G).unwrap());
            se.push(info.se_of(ParamKind::Theta).unwrap());
            // delta method for sigma = sqrt(sigma2)
            se.push(info.se_of(ParamKind::Sigma2).unwrap() / (2.0 * p.sigma2.sqrt()));
            se
        })
    } else {
        None
    };
    Ok(ReplicateOutcome {
        rep,
        estimates: est,
        standard_errors,
        iterations: r.iterations,
        converged: r.converged,
        loglik: r.loglik(),
    })
}

/// Fits every replicate from the default initialization and summarizes the
/// estimates. Failed replicates are recorded, not fatal.
pub fn run_recovery(cfg: &ScenarioConfig, fitcfg: &FitConfig, exec: Execution) -> Result<RecoveryReport> {
    cfg.check()?;
    fitcfg.check()?;
    if cfg.n_reps == 0 {
        return Err(Error::NoReplicates);
    }
    let reps: Vec<usize> = (0..cfg.n_reps).collect();
    let outcomes = exec.map(&reps, |&rep| fit_replicate(cfg, fitcfg, rep));
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (rep, o) in reps.into_iter().zip(outcomes) {
        match o {
            Ok(r) => replicates.push(r),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    Ok(summarize(cfg.parameter_names(), cfg.truth(), replicates, failures))
}

/// Aggregates replicate estimates; the result does not depend on the order
/// of `replicates`.
pub fn summarize(
    names: Vec<String>,
    truth: Vec<f64>,
    mut replicates: Vec<ReplicateOutcome>,
    mut failures: Vec<(usize, String)>,
) -> RecoveryReport {
    replicates.sort_by_key(|r| r.rep);
    failures.sort_by_key(|f| f.0);
    let summaries = if replicates.is_empty() {
        Vec::new()
    } else {
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut col: Vec<f64> = replicates.iter().map(|r| r.estimates[i]).collect();
                let (mean, sd) = mean_sd(&col);
                col.sort_by(f64::total_cmp);
                ParameterSummary {
                    name: name.clone(),
                    truth: truth[i],
                    mean,
                    sd,
                    lower: quantile(&col, 0.025),
                    upper: quantile(&col, 0.975),
                }
            })
            .collect()
    };
    RecoveryReport { names, summaries, replicates, failures }
}
