use hdgc::simulate::{simulate, ScenarioConfig};

fn long_run(rows: usize, cols: usize, t_len: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::grid_bias(1, t_len, 1, 99);
    c.rows = rows;
    c.cols = cols;
    c.alpha = vec![1.0; rows * cols];
    c
}

#[test]
fn latent_field_has_ar1_autocorrelation() {
    let mut c = long_run(1, 1, 20_000);
    c.theta = 1.0;
    let s = simulate(&c, 0).unwrap();
    let z: Vec<f64> = s.latent.iter().map(|v| v[0]).collect();
    let m = z.iter().sum::<f64>() / z.len() as f64;
    let c0: f64 = z.iter().map(|v| (v - m).powi(2)).sum();
    let c1: f64 = z.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    let rho = c1 / c0;
    // standard error about sqrt((1 - g^2) / T) ~ 0.006
    assert!((rho - c.g).abs() < 0.025, "lag-one autocorrelation {rho}");
    let var = c0 / z.len() as f64;
    assert!((var - 1.0 / (1.0 - c.g * c.g)).abs() < 0.08, "stationary variance {var}");
}

#[test]
fn innovations_have_exponential_spatial_covariance() {
    let mut c = long_run(1, 3, 20_000);
    c.theta = 2.0;
    let s = simulate(&c, 1).unwrap();
    let eta: Vec<_> = s.latent.windows(2).map(|w| &w[1] - &w[0] * c.g).collect();
    let t = eta.len() as f64;
    for (a, b) in [(0, 0), (0, 1), (0, 2), (1, 2)] {
        let cov = eta.iter().map(|e| e[a] * e[b]).sum::<f64>() / t;
        let dist = (a as f64 - b as f64).abs();
        let want = (-dist / c.theta).exp();
        assert!((cov - want).abs() < 0.04, "pair ({a},{b}): {cov} vs {want}");
    }
}

#[test]
fn measurement_error_and_calibration_enter_the_observations() {
    let mut c = long_run(1, 2, 10_000);
    c.alpha = vec![0.5, 2.0];
    c.sigma = 0.3;
    let s = simulate(&c, 2).unwrap();
    let d = &s.dataset;
    for (i, a) in c.alpha.iter().enumerate() {
        let resid: Vec<f64> = (0..c.t_len).map(|t| d.y[(i, t)] - a * s.latent[t + 1][i]).collect();
        let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((sd - 0.3).abs() < 0.015, "station {i}: residual sd {sd}");
    }
}

#[test]
fn missing_rate_is_honoured() {
    let mut c = long_run(3, 3, 2_000);
    c.missing_rate = 0.2;
    let d = simulate(&c, 0).unwrap().dataset;
    assert!((d.missing_rate() - 0.2).abs() < 0.01);
}

#[test]
fn replicates_are_independent_streams() {
    let c = ScenarioConfig::scenario_one(200, 2, 5);
    let a = simulate(&c, 0).unwrap().dataset;
    let b = simulate(&c, 1).unwrap().dataset;
    let n = (a.n() * a.t_len()) as f64;
    let corr: f64 = a.y.iter().zip(b.y.iter()).map(|(x, y)| x * y).sum::<f64>() / (a.y.norm() * b.y.norm());
    assert!(corr.abs() < 4.0 / n.sqrt() * 3.0, "cross-replicate correlation {corr}");
}
