use std::collections::HashMap;
use std::path::Path;

use hdgc::detect::{detect, AlphaPanel, DetectionReport};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::DetectConfig;
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, num, opt, period_dir, read_csv, write_csv, write_toml};

fn parse(path: &Path, line: u64, v: &str) -> CliResult<f64> {
    v.parse().map_err(|_| CliError::Data(format!("{} (line {line}): `{v}` is not a number", path.display())))
}

/// Assembles the station x period panel from the per-period `alpha.csv`
/// files of a fit output directory, in `periods.csv` order.
pub fn load_panel(input: &Path) -> CliResult<AlphaPanel> {
    let index = input.join("periods.csv");
    let (header, rows) = read_csv(&index)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", index.display())))
    };
    let (pc, sc) = (col("period")?, col("status")?);
    let labels: Vec<String> = rows.iter().filter(|(_, r)| &r[sc] != "failed").map(|(_, r)| r[pc].to_string()).collect();

    let mut stations: Vec<String> = Vec::new();
    let mut groups: Vec<Option<String>> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut periods = Vec::new();
    for label in &labels {
        let path = period_dir(input, label).join("alpha.csv");
        let (h, rows) = read_csv(&path)?;
        let needed = ["station_id", "group", "alpha", "se"];
        let idx: Vec<usize> = needed
            .iter()
            .map(|n| {
                h.iter()
                    .position(|c| c == n)
                    .ok_or_else(|| CliError::Data(format!("{}: missing column `{n}`", path.display())))
            })
            .collect::<CliResult<_>>()?;
        let p = periods.len();
        periods.push(label.clone());
        for (line, r) in rows {
            let id = r[idx[0]].to_string();
            let s = *pos.entry(id.clone()).or_insert_with(|| {
                stations.push(id);
                groups.push(Some(r[idx[1]].to_string()).filter(|g| !g.is_empty()));
                stations.len() - 1
            });
            // no standard error: the estimate still ranks and clusters, its band is unbounded
            let se = if r[idx[3]].is_empty() { f64::INFINITY } else { parse(&path, line, &r[idx[3]])? };
            cells.push((s, p, parse(&path, line, &r[idx[2]])?, se));
        }
    }
    if periods.is_empty() || stations.is_empty() {
        return Err(CliError::Data(format!("no calibration estimates found under {}", input.display())));
    }
    let (n, np) = (stations.len(), periods.len());
    let mut alpha = DMatrix::zeros(n, np);
    let mut se = DMatrix::from_element(n, np, f64::INFINITY);
    let mut present = DMatrix::from_element(n, np, false);
    for (s, p, a, e) in cells {
        alpha[(s, p)] = a;
        se[(s, p)] = e;
        present[(s, p)] = true;
    }
    Ok(AlphaPanel::new(stations, groups, periods, alpha, se, present)?)
}

#[derive(Serialize)]
struct Summary<'a> {
    periods: &'a [String],
    k: usize,
    z: f64,
    clustering_periods: &'a [String],
    excluded_from_clustering: &'a [String],
    flagged: &'a [String],
}

pub fn write_report(out: &Path, panel: &AlphaPanel, r: &DetectionReport, cfg: &DetectConfig) -> CliResult<()> {
    let mut rank_rows = Vec::new();
    for pr in &r.ranks.periods {
        for g in &pr.ranks {
            let tied = pr.ties.iter().any(|t| t.contains(&g.group));
            let status = if tied { "tied" } else { "ranked" };
            rank_rows.push(vec![pr.period.clone(), g.group.clone(), num(g.mean), g.rank.to_string(), status.into()]);
        }
        for g in &pr.skipped {
            rank_rows.push(vec![pr.period.clone(), g.clone(), String::new(), String::new(), "skipped".into()]);
        }
    }
    write_csv(&out.join("ranks.csv"), &["period", "group", "mean", "rank", "status"], rank_rows)?;

    let c = &r.clustering;
    let group_of = |id: &str| panel.position(id).map(|s| panel.groups[s].clone());
    write_csv(
        &out.join("clusters.csv"),
        &["station_id", "group", "cluster"],
        c.stations
            .iter()
            .zip(&c.labels)
            .map(|(s, l)| Ok(vec![s.clone(), group_of(s)?, l.to_string()]))
            .collect::<hdgc::Result<Vec<_>>>()?,
    )?;
    write_csv(
        &out.join("cluster_summary.csv"),
        &["cluster", "size", "mean", "sd", "members"],
        c.summaries.iter().map(|s| {
            vec![s.label.to_string(), s.members.len().to_string(), num(s.mean), opt(s.sd), s.members.join(" ")]
        }),
    )?;
    write_csv(
        &out.join("merges.csv"),
        &["step", "left", "right", "height", "size"],
        c.merges.iter().enumerate().map(|(i, m)| {
            vec![(i + 1).to_string(), m.left.to_string(), m.right.to_string(), num(m.height), m.size.to_string()]
        }),
    )?;
    write_csv(
        &out.join("comparisons.csv"),
        &[
            "site_a",
            "site_b",
            "period",
            "a_estimate",
            "a_lower",
            "a_upper",
            "b_estimate",
            "b_lower",
            "b_upper",
            "separated",
        ],
        r.comparisons.iter().flat_map(|cmp| {
            cmp.periods.iter().map(move |p| {
                vec![
                    cmp.site_a.clone(),
                    cmp.site_b.clone(),
                    p.period.clone(),
                    num(p.a.estimate),
                    num(p.a.lower),
                    num(p.a.upper),
                    num(p.b.estimate),
                    num(p.b.lower),
                    num(p.b.upper),
                    p.separated.to_string(),
                ]
            })
        }),
    )?;
    write_csv(
        &out.join("flagged.csv"),
        &["station_id", "group"],
        r.flagged.iter().map(|s| Ok(vec![s.clone(), group_of(s)?])).collect::<hdgc::Result<Vec<_>>>()?,
    )?;
    write_toml(
        &out.join("detect_summary.toml"),
        &Summary {
            periods: &panel.periods,
            k: cfg.k,
            z: cfg.z,
            clustering_periods: &c.periods,
            excluded_from_clustering: &c.excluded,
            flagged: &r.flagged,
        },
    )
}

pub fn run(input: &Path, cfg: &DetectConfig, out: &Path) -> CliResult<()> {
    let panel = load_panel(input)?;
    let report = detect(&panel, cfg.k, &cfg.pairs, cfg.z)?;
    ensure_dir(out)?;
    write_report(out, &panel, &report, cfg)
}
