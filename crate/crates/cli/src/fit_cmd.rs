use std::path::Path;

use hdgc::infomatrix::{information_matrix, ParamIndexMap};
use hdgc::types::{standardize, Standardization};
use hdgc::{fit, Dataset, Execution, FitResult};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ingest::{format_timestamp, periods, read_observations, read_stations, Ingested, Period};
use crate::output::{ensure_dir, num, opt, period_dir, write_csv, write_toml};

/// Everything produced for one period.
pub struct PeriodFit {
    pub dataset: Dataset,
    pub excluded: Vec<String>,
    pub standardization: Option<Standardization>,
    pub result: FitResult,
    pub index: ParamIndexMap,
    pub se: Option<Vec<f64>>,
    pub unidentified: Vec<String>,
    pub rmse: f64,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    period: &'a str,
    start: String,
    end: String,
    hours: usize,
    stations_in_file: usize,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitDiagnostics<'a>>,
}

#[derive(Serialize)]
struct FitDiagnostics<'a> {
    stations: usize,
    excluded: &'a [String],
    missing_rate: f64,
    iterations: usize,
    converged: bool,
    loglik: f64,
    rmse: f64,
    unidentified: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<&'a Standardization>,
}

/// Residual root-mean-square over observed cells, on the scale of the
/// input data.
fn rmse(d: &Dataset, r: &FitResult, scale: f64) -> f64 {
    let p = &r.params;
    let mut ss = 0.0;
    let mut count = 0usize;
    for t in 0..d.t_len() {
        let xb = &d.covariates[t] * &p.beta;
        let z = &r.smoothed.means[t + 1];
        for s in 0..d.n() {
            if d.observed[(s, t)] {
                let e = (d.y[(s, t)] - xb[s] - p.alpha[s] * z[s]) * scale;
                ss += e * e;
                count += 1;
            }
        }
    }
    (ss / count.max(1) as f64).sqrt()
}

/// Exclusion, standardization, EM and standard errors for one slice.
pub fn fit_period(raw: &Dataset, cfg: &RunConfig) -> CliResult<PeriodFit> {
    let rates = raw.missing_rates();
    let excluded: Vec<String> = raw
        .stations
        .stations
        .iter()
        .zip(&rates)
        .filter(|(_, &r)| r > cfg.missing_threshold)
        .map(|(s, _)| s.id.clone())
        .collect();
    let kept = hdgc::types::filter_stations_by_missing(raw, cfg.missing_threshold)?;
    if kept.n() < 2 {
        return Err(CliError::Data(format!("only {} station(s) left after exclusion", kept.n())));
    }
    let (dataset, standardization) = if cfg.standardize {
        let (d, s) = standardize(&kept)?;
        (d, Some(s))
    } else {
        (kept, None)
    };
    let result = fit(&dataset, &cfg.fit, None)?;
    if !result.converged {
        log::warn!("EM did not converge within {} iterations", cfg.fit.max_iter);
    }
    let index = ParamIndexMap::new(&dataset);
    let (se, unidentified) = if cfg.standard_errors {
        let info = information_matrix(&dataset, &result.params, Execution::Sequential)?;
        (info.se.map(|v| v.iter().copied().collect()), info.unidentified)
    } else {
        (None, Vec::new())
    };
    let scale = standardization.as_ref().map_or(1.0, |s| s.response.sd);
    let rmse = rmse(&dataset, &result, scale);
    Ok(PeriodFit { dataset, excluded, standardization, result, index, se, unidentified, rmse })
}

fn write_period(dir: &Path, pf: &PeriodFit) -> CliResult<()> {
    let p = &pf.result.params;
    let se = |i: usize| opt(pf.se.as_ref().map(|v| v[i]));
    write_csv(
        &dir.join("params.csv"),
        &["parameter", "estimate", "se"],
        (0..pf.index.len()).map(|i| vec![pf.index.name(i).to_string(), num(pf.index.value(p, i)), se(i)]),
    )?;
    let k = pf.dataset.k();
    write_csv(
        &dir.join("alpha.csv"),
        &["station_id", "group", "alpha", "se"],
        pf.dataset
            .stations
            .stations
            .iter()
            .enumerate()
            .map(|(s, st)| vec![st.id.clone(), st.group.clone().unwrap_or_default(), num(p.alpha[s]), se(k + s)]),
    )
}

pub fn run(cfg: &RunConfig, out: &Path, exec: Execution) -> CliResult<()> {
    cfg.check()?;
    let stations = read_stations(&cfg.stations, cfg.metric)?;
    let Ingested { dataset, times, dropped_cells } =
        read_observations(&cfg.observations, &stations, cfg.covariates.as_deref(), &cfg.lags)?;
    if dropped_cells > 0 {
        log::warn!("{dropped_cells} responses dropped for missing (lagged) covariates");
    }
    ensure_dir(out)?;
    let slices: Vec<Period> = periods(&times, cfg.periods);
    let outcomes: Vec<CliResult<PeriodFit>> = exec.map(&slices, |p| {
        log::info!("fitting period {}", p.label);
        fit_period(&dataset.select_times(p.start, p.end), cfg)
    });

    let mut first_error: Option<CliError> = None;
    let mut summary = Vec::new();
    for (p, outcome) in slices.iter().zip(outcomes) {
        let dir = period_dir(out, &p.label);
        ensure_dir(&dir)?;
        let mut diag = Diagnostics {
            period: &p.label,
            start: format_timestamp(&times[p.start]),
            end: format_timestamp(&times[p.end - 1]),
            hours: p.end - p.start,
            stations_in_file: dataset.n(),
            status: "ok",
            error: None,
            fit: None,
        };
        match &outcome {
            Ok(pf) => {
                write_period(&dir, pf)?;
                diag.status = if pf.result.converged { "ok" } else { "not-converged" };
                diag.fit = Some(FitDiagnostics {
                    stations: pf.dataset.n(),
                    excluded: &pf.excluded,
                    missing_rate: pf.dataset.missing_rate(),
                    iterations: pf.result.iterations,
                    converged: pf.result.converged,
                    loglik: pf.result.loglik(),
                    rmse: pf.rmse,
                    unidentified: &pf.unidentified,
                    standardization: pf.standardization.as_ref(),
                });
            }
            Err(e) => {
                log::error!("period {}: {e}", p.label);
                diag.status = "failed";
                diag.error = Some(e.to_string());
            }
        }
        write_toml(&dir.join("diagnostics.toml"), &diag)?;
        summary.push(vec![p.label.clone(), diag.start.clone(), diag.end.clone(), diag.status.to_string()]);
        if let Err(e) = outcome {
            first_error.get_or_insert(e);
        }
    }
    write_csv(&out.join("periods.csv"), &["period", "start", "end", "status"], summary)?;
    first_error.map_or(Ok(()), Err)
}
