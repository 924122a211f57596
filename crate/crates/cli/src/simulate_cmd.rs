use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use hdgc::simulate::{generate, run_recovery, RecoveryReport};
use hdgc::{Dataset, Execution, FitConfig};
use serde::Serialize;

use crate::config::{PeriodRule, RunConfig, SimulateConfig};
use crate::error::{CliError, CliResult};
use crate::ingest::format_timestamp;
use crate::output::{ensure_dir, num, opt, write_csv, write_toml};

/// Long-form observations with hourly timestamps from `start`; missing
/// responses are written as empty fields.
pub fn write_observations(path: &Path, d: &Dataset, start: NaiveDateTime) -> CliResult<()> {
    let mut header = vec!["station_id", "timestamp", "y"];
    header.extend(d.covariate_names.iter().map(String::as_str));
    let rows = (0..d.t_len()).flat_map(|t| {
        let ts = format_timestamp(&(start + Duration::hours(t as i64)));
        (0..d.n()).map(move |s| {
            let mut r = vec![d.stations.stations[s].id.clone(), ts.clone()];
            r.push(if d.observed[(s, t)] { num(d.y[(s, t)]) } else { String::new() });
            r.extend((0..d.k()).map(|j| num(d.covariates[t][(s, j)])));
            r
        })
    });
    write_csv(path, &header, rows)
}

pub fn write_stations(path: &Path, d: &Dataset) -> CliResult<()> {
    write_csv(
        path,
        &["station_id", "lat", "lon", "group"],
        d.stations
            .stations
            .iter()
            .map(|s| vec![s.id.clone(), num(s.coord[0]), num(s.coord[1]), s.group.clone().unwrap_or_default()]),
    )
}

/// Writes `dataset` in the ingestion format starting 2014-03-01T00:00:00,
/// plus a `run.toml` that fits it as one period on the raw scale with the
/// given EM settings.
pub fn write_dataset(dir: &Path, d: &Dataset, fit: &FitConfig) -> CliResult<()> {
    ensure_dir(dir)?;
    write_stations(&dir.join("stations.csv"), d)?;
    let start = NaiveDate::from_ymd_opt(2014, 3, 1).and_then(|d| d.and_hms_opt(0, 0, 0)).expect("valid date");
    write_observations(&dir.join("observations.csv"), d, start)?;
    let run = RunConfig {
        stations: "stations.csv".into(),
        observations: "observations.csv".into(),
        covariates: Some(d.covariate_names.clone()),
        lags: Default::default(),
        periods: PeriodRule::Whole,
        missing_threshold: 1.0,
        metric: d.stations.metric,
        standardize: false,
        standard_errors: true,
        fit: *fit,
    };
    write_toml(&dir.join("run.toml"), &run)
}

pub fn write_report(out: &Path, report: &RecoveryReport) -> CliResult<()> {
    let mut header = vec!["statistic"];
    header.extend(report.names.iter().map(String::as_str));
    let row = |label: &str, f: &dyn Fn(usize) -> String| {
        let mut r = vec![label.to_string()];
        r.extend((0..report.summaries.len()).map(f));
        r
    };
    let s = &report.summaries;
    write_csv(
        &out.join("recovery_report.csv"),
        &header,
        [
            row("Mean", &|i| num(s[i].mean)),
            row("Sd", &|i| opt(s[i].sd)),
            row("LB", &|i| num(s[i].lower)),
            row("UB", &|i| num(s[i].upper)),
        ],
    )?;

    let mut header: Vec<String> = ["rep", "converged", "iterations", "loglik"].map(String::from).to_vec();
    header.extend(report.names.iter().cloned());
    let with_se = report.replicates.iter().any(|r| r.standard_errors.is_some());
    if with_se {
        header.extend(report.names.iter().map(|n| format!("se_{n}")));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &out.join("replicates.csv"),
        &header,
        report.replicates.iter().map(|r| {
            let mut row = vec![r.rep.to_string(), r.converged.to_string(), r.iterations.to_string(), num(r.loglik)];
            row.extend(r.estimates.iter().map(|&v| num(v)));
            if with_se {
                match &r.standard_errors {
                    Some(se) => row.extend(se.iter().map(|&v| num(v))),
                    None => row.extend(report.names.iter().map(|_| String::new())),
                }
            }
            row
        }),
    )?;
    write_csv(
        &out.join("failures.csv"),
        &["rep", "error"],
        report.failures.iter().map(|(rep, e)| vec![rep.to_string(), e.clone()]),
    )
}

#[derive(Serialize)]
struct Provenance<'a> {
    #[serde(flatten)]
    config: &'a SimulateConfig,
    replicates_fitted: usize,
    replicates_failed: usize,
}

pub fn run(cfg: &SimulateConfig, out: &Path, exec: Execution) -> CliResult<()> {
    ensure_dir(out)?;
    let report = run_recovery(&cfg.scenario, &cfg.fit, exec)?;
    write_report(out, &report)?;
    if cfg.write_datasets {
        let reps: Vec<usize> = (0..cfg.scenario.n_reps).collect();
        for rep in reps {
            write_dataset(
                &out.join("datasets").join(format!("rep_{rep:04}")),
                &generate(&cfg.scenario, rep)?,
                &cfg.fit,
            )?;
        }
    }
    write_toml(
        &out.join("scenario.toml"),
        &Provenance {
            config: cfg,
            replicates_fitted: report.replicates.len(),
            replicates_failed: report.failures.len(),
        },
    )?;
    for (rep, e) in &report.failures {
        log::warn!("replicate {rep} failed: {e}");
    }
    if report.replicates.is_empty() {
        return Err(CliError::Numerical("every replicate failed".into()));
    }
    Ok(())
}
