//! CSV ingestion onto a regular hourly grid, and period slicing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use hdgc::{Dataset, Metric, Station, StationSet};
use nalgebra::DMatrix;

use crate::config::PeriodRule;
use crate::error::{CliError, CliResult};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const ACCEPTED_FORMATS: [&str; 4] = [TIMESTAMP_FORMAT, "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"];

const KEY_COLUMNS: [&str; 3] = ["station_id", "timestamp", "y"];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let t = ACCEPTED_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())?;
    (t.minute() == 0 && t.second() == 0 && t.nanosecond() == 0).then_some(t)
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::csv(path, e))
}

fn schema(path: &Path, line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{} (line {line}): {msg}", path.display()))
}

fn headers(path: &Path, rdr: &mut csv::Reader<std::fs::File>) -> CliResult<Vec<String>> {
    let h = rdr.headers().map_err(|e| CliError::csv(path, e))?;
    if h.is_empty() || h.iter().all(str::is_empty) {
        return Err(schema(path, 1, "missing header row"));
    }
    Ok(h.iter().map(String::from).collect())
}

fn column(path: &Path, headers: &[String], name: &str) -> CliResult<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| schema(path, 1, format!("missing column `{name}`")))
}

fn number(path: &Path, line: u64, field: &str, what: &str) -> CliResult<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(schema(path, line, format!("`{field}` is not a finite number in column `{what}`"))),
    }
}

/// Reads `station_id, lat, lon[, group]`. Under the planar metric the two
/// coordinate columns are taken as plain km coordinates.
pub fn read_stations(path: &Path, metric: Metric) -> CliResult<StationSet> {
    let mut rdr = reader(path)?;
    let h = headers(path, &mut rdr)?;
    let (id, lat, lon) = (column(path, &h, "station_id")?, column(path, &h, "lat")?, column(path, &h, "lon")?);
    let group = h.iter().position(|c| c == "group");
    let mut stations = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let sid = rec.get(id).unwrap_or("").to_string();
        if sid.is_empty() {
            return Err(schema(path, line, "empty station_id"));
        }
        if seen.insert(sid.clone(), line).is_some() {
            return Err(schema(path, line, format!("duplicate station `{sid}`")));
        }
        let coord = |c: usize, what: &str| {
            number(path, line, rec.get(c).unwrap_or(""), what)?
                .ok_or_else(|| schema(path, line, format!("missing {what}")))
        };
        let mut st = Station::new(sid, [coord(lat, "lat")?, coord(lon, "lon")?]);
        if let Some(g) = group.and_then(|g| rec.get(g)).filter(|g| !g.is_empty()) {
            st = st.with_group(g);
        }
        stations.push(st);
    }
    if stations.is_empty() {
        return Err(schema(path, 2, "no stations"));
    }
    Ok(StationSet::new(stations, metric))
}

/// Observations on the full hourly grid spanned by the file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub times: Vec<NaiveDateTime>,
    /// Responses present in the file but unusable because a (lagged)
    /// covariate is missing.
    pub dropped_cells: usize,
}

/// Reads long-form `station_id, timestamp, y, covariates...` rows.
/// Missing cells are empty fields or absent rows.
pub fn read_observations(
    path: &Path,
    stations: &StationSet,
    roster: Option<&[String]>,
    lags: &BTreeMap<String, usize>,
) -> CliResult<Ingested> {
    let mut rdr = reader(path)?;
    let h = headers(path, &mut rdr)?;
    let (sc, tc, yc) = (column(path, &h, "station_id")?, column(path, &h, "timestamp")?, column(path, &h, "y")?);
    let names: Vec<String> = match roster {
        Some(r) => r.to_vec(),
        None => h.iter().filter(|c| !KEY_COLUMNS.contains(&c.as_str())).cloned().collect(),
    };
    let cols: Vec<usize> = names.iter().map(|n| column(path, &h, n)).collect::<CliResult<_>>()?;
    if let Some(unknown) = lags.keys().find(|k| !names.contains(k)) {
        return Err(CliError::Usage(format!("lag declared for unknown covariate `{unknown}`")));
    }

    struct Row {
        station: usize,
        time: NaiveDateTime,
        y: Option<f64>,
        x: Vec<Option<f64>>,
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let sid = rec.get(sc).unwrap_or("");
        let station = stations.position(sid).ok_or_else(|| schema(path, line, format!("unknown station `{sid}`")))?;
        let ts = rec.get(tc).unwrap_or("");
        let time = parse_timestamp(ts).ok_or_else(|| schema(path, line, format!("`{ts}` is not an ISO-8601 hour")))?;
        let y = number(path, line, rec.get(yc).unwrap_or(""), "y")?;
        let x = cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| number(path, line, rec.get(c).unwrap_or(""), n))
            .collect::<CliResult<Vec<_>>>()?;
        rows.push((line, Row { station, time, y, x }));
    }
    if rows.is_empty() {
        return Err(schema(path, 2, "no observation rows"));
    }

    let start = rows.iter().map(|r| r.1.time).min().expect("non-empty");
    let end = rows.iter().map(|r| r.1.time).max().expect("non-empty");
    let t_len = (end - start).num_hours() as usize + 1;
    let times: Vec<NaiveDateTime> = (0..t_len).map(|t| start + Duration::hours(t as i64)).collect();
    let n = stations.len();
    let k = names.len();

    let mut y = DMatrix::zeros(n, t_len);
    let mut has_y = DMatrix::from_element(n, t_len, false);
    let mut raw: Vec<DMatrix<Option<f64>>> = vec![DMatrix::from_element(n, t_len, None); k];
    let mut filled = DMatrix::from_element(n, t_len, false);
    for (line, r) in rows {
        let t = (r.time - start).num_hours() as usize;
        if filled[(r.station, t)] {
            return Err(schema(
                path,
                line,
                format!(
                    "duplicate row for station `{}` at {}",
                    stations.stations[r.station].id,
                    format_timestamp(&r.time)
                ),
            ));
        }
        filled[(r.station, t)] = true;
        if let Some(v) = r.y {
            y[(r.station, t)] = v;
            has_y[(r.station, t)] = true;
        }
        for (j, v) in r.x.into_iter().enumerate() {
            raw[j][(r.station, t)] = v;
        }
    }

    let lag_of: Vec<usize> = names.iter().map(|n| lags.get(n).copied().unwrap_or(0)).collect();
    let lagged = |j: usize, s: usize, t: usize| t.checked_sub(lag_of[j]).and_then(|u| raw[j][(s, u)]);
    let mut observed = has_y.clone();
    let mut dropped = 0;
    let mut covariates = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut x = DMatrix::zeros(n, k);
        for s in 0..n {
            let vals: Vec<Option<f64>> = (0..k).map(|j| lagged(j, s, t)).collect();
            if vals.iter().all(Option::is_some) {
                for (j, v) in vals.into_iter().enumerate() {
                    x[(s, j)] = v.expect("checked");
                }
            } else if observed[(s, t)] {
                observed[(s, t)] = false;
                dropped += 1;
            }
        }
        covariates.push(x);
    }
    for s in 0..n {
        for t in 0..t_len {
            if !observed[(s, t)] {
                y[(s, t)] = 0.0;
            }
        }
    }
    let dataset = Dataset::new(stations.clone(), y, observed, covariates, names)?;
    Ok(Ingested { dataset, times, dropped_cells: dropped })
}

/// Meteorological season label; December counts towards the winter that
/// starts in its own year.
pub fn season_label(t: &NaiveDateTime) -> String {
    let (year, month) = (t.year(), t.month());
    match month {
        3..=5 => format!("{year}-MAM"),
        6..=8 => format!("{year}-JJA"),
        9..=11 => format!("{year}-SON"),
        12 => format!("{year}-DJF"),
        _ => format!("{}-DJF", year - 1),
    }
}

/// A contiguous slice `start..end` of the hourly grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Period {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

pub fn periods(times: &[NaiveDateTime], rule: PeriodRule) -> Vec<Period> {
    match rule {
        PeriodRule::Whole => vec![Period { label: "all".into(), start: 0, end: times.len() }],
        PeriodRule::Seasonal => {
            let mut out: Vec<Period> = Vec::new();
            for (t, time) in times.iter().enumerate() {
                let label = season_label(time);
                match out.last_mut() {
                    Some(p) if p.label == label => p.end = t + 1,
                    _ => out.push(Period { label, start: t, end: t + 1 }),
                }
            }
            out
        }
    }
}
