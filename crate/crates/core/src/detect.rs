//! Biased-station detection from per-period calibration estimates: group
//! rankings, Ward clustering, confidence-band comparisons and the
//! fine/coarse particulate ratio diagnostic.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulate::mean_sd;

/// Station x period table of calibration estimates and standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPanel {
    pub stations: Vec<String>,
    /// Group label per station; ungrouped stations form their own group.
    pub groups: Vec<String>,
    pub periods: Vec<String>,
    pub alpha: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub present: DMatrix<bool>,
}

impl AlphaPanel {
    pub fn new(
        stations: Vec<String>,
        groups: Vec<Option<String>>,
        periods: Vec<String>,
        alpha: DMatrix<f64>,
        se: DMatrix<f64>,
        present: DMatrix<bool>,
    ) -> Result<Self> {
        let shape = (stations.len(), periods.len());
        if groups.len() != shape.0 || alpha.shape() != shape || se.shape() != shape || present.shape() != shape {
            return Err(Error::InvalidPanel(format!(
                "expected {} stations x {} periods in every table",
                shape.0, shape.1
            )));
        }
        for ((a, s), &p) in alpha.iter().zip(se.iter()).zip(present.iter()) {
            // an infinite se marks an estimate without a usable standard error
            if p && !(a.is_finite() && *s > 0.0) {
                return Err(Error::InvalidPanel("present cells need a finite estimate and positive se".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = stations.iter().find(|s| !seen.insert(*s)) {
            return Err(Error::InvalidPanel(format!("duplicate station `{dup}`")));
        }
        let groups = groups.into_iter().zip(&stations).map(|(g, s)| g.unwrap_or_else(|| s.clone())).collect();
        Ok(Self { stations, groups, periods, alpha, se, present })
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn position(&self, station: &str) -> Result<usize> {
        self.stations.iter().position(|s| s == station).ok_or_else(|| Error::UnknownStation(station.to_string()))
    }

    /// Distinct group labels in sorted order.
    pub fn group_labels(&self) -> Vec<String> {
        let mut g = self.groups.clone();
        g.sort();
        g.dedup();
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRank {
    pub group: String,
    pub mean: f64,
    /// 1 = lowest mean.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodRanks {
    pub period: String,
    /// Ranked groups in rank order.
    pub ranks: Vec<GroupRank>,
    /// Sets of groups with exactly equal means (ranked in label order).
    pub ties: Vec<Vec<String>>,
    /// Groups without any estimate in this period.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTable {
    pub groups: Vec<String>,
    pub periods: Vec<PeriodRanks>,
}

impl RankTable {
    pub fn rank_of(&self, period: usize, group: &str) -> Option<usize> {
        self.periods[period].ranks.iter().find(|r| r.group == group).map(|r| r.rank)
    }

    /// Fraction of the periods in which `group` was ranked that it ranked lowest.
    pub fn lowest_share(&self, group: &str) -> f64 {
        let ranked: Vec<usize> = (0..self.periods.len()).filter_map(|p| self.rank_of(p, group)).collect();
        if ranked.is_empty() {
            return 0.0;
        }
        ranked.iter().filter(|&&r| r == 1).count() as f64 / ranked.len() as f64
    }
}

/// Per period, averages the estimates of each group and ranks the group
/// means ascending. Equal means are ranked in label order and reported.
pub fn rank_groups(panel: &AlphaPanel) -> RankTable {
    let labels = panel.group_labels();
    let periods = (0..panel.n_periods())
        .map(|p| {
            let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for s in 0..panel.n_stations() {
                if panel.present[(s, p)] {
                    let e = sums.entry(panel.groups[s].as_str()).or_insert((0.0, 0));
                    e.0 += panel.alpha[(s, p)];
                    e.1 += 1;
                }
            }
            let skipped: Vec<String> = labels.iter().filter(|g| !sums.contains_key(g.as_str())).cloned().collect();
            // BTreeMap iteration is in label order, so a stable sort breaks ties by label
            let mut means: Vec<(String, f64)> =
                sums.into_iter().map(|(g, (sum, c))| (g.to_string(), sum / c as f64)).collect();
            means.sort_by(|a, b| a.1.total_cmp(&b.1));
            let mut ties: Vec<Vec<String>> = Vec::new();
            let mut i = 0;
            while i < means.len() {
                let j = (i..means.len()).take_while(|&j| means[j].1 == means[i].1).count() + i;
                if j - i > 1 {
                    ties.push(means[i..j].iter().map(|m| m.0.clone()).collect());
                }
                i = j;
            }
            let ranks = means
                .into_iter()
                .enumerate()
                .map(|(i, (group, mean))| GroupRank { group, mean, rank: i + 1 })
                .collect();
            PeriodRanks { period: panel.periods[p].clone(), ranks, ties, skipped }
        })
        .collect();
    RankTable { groups: labels, periods }
}

/// One agglomeration step. Leaves are `0..n`; the cluster formed at step
/// `i` gets id `n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Ward distance `sqrt(2 * increase in within-cluster sum of squares)`.
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    /// 1 = lowest mean calibration.
    pub label: usize,
    pub members: Vec<String>,
    pub mean: f64,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clustering {
    pub k: usize,
    /// Clustered stations (those with at least one estimate).
    pub stations: Vec<String>,
    /// Stations left out because they have no estimate at all.
    pub excluded: Vec<String>,
    /// Periods with an estimate for every clustered station.
    pub periods: Vec<String>,
    /// Cluster label per entry of `stations`.
    pub labels: Vec<usize>,
    pub merges: Vec<Merge>,
    pub summaries: Vec<ClusterSummary>,
}

impl Clustering {
    pub fn label_of(&self, station: &str) -> Option<usize> {
        self.stations.iter().position(|s| s == station).map(|i| self.labels[i])
    }

    pub fn lowest(&self) -> &ClusterSummary {
        &self.summaries[0]
    }
}

/// Ward agglomeration of the rows of `points` via the Lance-Williams
/// recurrence on squared Euclidean distances. Ties go to the pair with the
/// smallest indices.
pub fn ward_linkage(points: &DMatrix<f64>) -> Vec<Merge> {
    let n = points.nrows();
    let mut d2 = DMatrix::from_fn(n, n, |i, j| (points.row(i) - points.row(j)).norm_squared());
    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && d2[(i, j)] < best.0 {
                    best = (d2[(i, j)], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if !active[m] || m == i || m == j {
                continue;
            }
            let nm = size[m] as f64;
            let v = ((ni + nm) * d2[(i, m)] + (nj + nm) * d2[(j, m)] - nm * dij) / (ni + nj + nm);
            d2[(i, m)] = v;
            d2[(m, i)] = v;
        }
        let (a, b) = (id[i].min(id[j]), id[i].max(id[j]));
        merges.push(Merge { left: a, right: b, height: dij.max(0.0).sqrt(), size: size[i] + size[j] });
        active[j] = false;
        size[i] += size[j];
        id[i] = n + step;
    }
    merges
}

/// Flat partition of `n` leaves after applying the first `n - k` merges;
/// returns a group index per leaf (arbitrary numbering).
fn cut(n: usize, merges: &[Merge], k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (step, m) in merges.iter().take(n - k).enumerate() {
        parent[m.left] = n + step;
        parent[m.right] = n + step;
    }
    (0..n).map(|i| root(&mut parent, i)).collect()
}

/// Ward clustering of stations on their estimate vectors over the periods
/// in which every clustered station has an estimate. Clusters are labelled
/// `1..=k` by ascending mean estimate.
pub fn hierarchical_cluster(panel: &AlphaPanel, k: usize) -> Result<Clustering> {
    let (keep, excluded): (Vec<usize>, Vec<usize>) =
        (0..panel.n_stations()).partition(|&s| (0..panel.n_periods()).any(|p| panel.present[(s, p)]));
    let n = keep.len();
    if k == 0 || k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    let periods: Vec<usize> = (0..panel.n_periods()).filter(|&p| keep.iter().all(|&s| panel.present[(s, p)])).collect();
    if periods.is_empty() {
        return Err(Error::NoCompletePeriod);
    }
    let points = DMatrix::from_fn(n, periods.len(), |i, j| panel.alpha[(keep[i], periods[j])]);
    let merges = ward_linkage(&points);
    let roots = cut(n, &merges, k);

    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in roots.iter().enumerate() {
        clusters.entry(*r).or_default().push(i);
    }
    let mut stats: Vec<(Vec<usize>, f64, Option<f64>)> = clusters
        .into_values()
        .map(|members| {
            let values: Vec<f64> =
                members.iter().flat_map(|&i| points.row(i).iter().copied().collect::<Vec<_>>()).collect();
            let (mean, sd) = mean_sd(&values);
            (members, mean, sd)
        })
        .collect();
    stats.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0[0].cmp(&b.0[0])));

    let mut labels = vec![0; n];
    let summaries = stats
        .into_iter()
        .enumerate()
        .map(|(c, (members, mean, sd))| {
            for &i in &members {
                labels[i] = c + 1;
            }
            ClusterSummary {
                label: c + 1,
                members: members.iter().map(|&i| panel.stations[keep[i]].clone()).collect(),
                mean,
                sd,
            }
        })
        .collect();
    Ok(Clustering {
        k,
        stations: keep.iter().map(|&s| panel.stations[s].clone()).collect(),
        excluded: excluded.iter().map(|&s| panel.stations[s].clone()).collect(),
        periods: periods.iter().map(|&p| panel.periods[p].clone()).collect(),
        labels,
        merges,
        summaries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Band {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Band {
    fn new(estimate: f64, se: f64, z: f64) -> Self {
        Self { estimate, lower: estimate - z * se, upper: estimate + z * se }
    }

    pub fn disjoint(&self, other: &Band) -> bool {
        self.upper < other.lower || other.upper < self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodComparison {
    pub period: String,
    pub a: Band,
    pub b: Band,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteComparison {
    pub site_a: String,
    pub site_b: String,
    pub z: f64,
    pub periods: Vec<PeriodComparison>,
}

impl SiteComparison {
    pub fn separated_count(&self) -> usize {
        self.periods.iter().filter(|p| p.separated).count()
    }
}

/// Default band multiplier (two-sided 95%).
pub const DEFAULT_Z: f64 = 1.96;

/// `estimate +/- z se` bands for two sites over their common periods.
pub fn compare_sites(panel: &AlphaPanel, site_a: &str, site_b: &str, z: f64) -> Result<SiteComparison> {
    let (a, b) = (panel.position(site_a)?, panel.position(site_b)?);
    let periods: Vec<PeriodComparison> = (0..panel.n_periods())
        .filter(|&p| panel.present[(a, p)] && panel.present[(b, p)])
        .map(|p| {
            let ba = Band::new(panel.alpha[(a, p)], panel.se[(a, p)], z);
            let bb = Band::new(panel.alpha[(b, p)], panel.se[(b, p)], z);
            PeriodComparison { period: panel.periods[p].clone(), a: ba, b: bb, separated: ba.disjoint(&bb) }
        })
        .collect();
    if periods.is_empty() {
        return Err(Error::NoCommonPeriod(site_a.to_string(), site_b.to_string()));
    }
    Ok(SiteComparison { site_a: site_a.to_string(), site_b: site_b.to_string(), z, periods })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioDiagnostic {
    /// Mean of the hourly ratios `pm25 / pm10`.
    pub mean_ratio: f64,
    pub sd_ratio: Option<f64>,
    /// `mean(pm25) / mean(pm10)` over the same hours.
    pub ratio_of_means: f64,
    pub pm25_mean: f64,
    pub pm25_sd: Option<f64>,
    pub pm10_mean: f64,
    pub pm10_sd: Option<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// Hourly ratio summary over aligned series. Hours with either value
/// missing or a non-positive denominator are skipped.
pub fn ratio_diagnostic(pm25: &[Option<f64>], pm10: &[Option<f64>]) -> Result<RatioDiagnostic> {
    if pm25.len() != pm10.len() {
        return Err(Error::InvalidPanel(format!("series lengths differ ({} vs {})", pm25.len(), pm10.len())));
    }
    let pairs: Vec<(f64, f64)> = pm25
        .iter()
        .zip(pm10)
        .filter_map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) if *b > 0.0 && a.is_finite() && b.is_finite() => Some((*a, *b)),
            _ => None,
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let ratios: Vec<f64> = pairs.iter().map(|(a, b)| a / b).collect();
    let fine: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let coarse: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mean_ratio, sd_ratio) = mean_sd(&ratios);
    let (pm25_mean, pm25_sd) = mean_sd(&fine);
    let (pm10_mean, pm10_sd) = mean_sd(&coarse);
    Ok(RatioDiagnostic {
        mean_ratio,
        sd_ratio,
        ratio_of_means: pm25_mean / pm10_mean,
        pm25_mean,
        pm25_sd,
        pm10_mean,
        pm10_sd,
        used: pairs.len(),
        skipped: pm25.len() - pairs.len(),
    })
}

/// Share of ranked periods a group must rank lowest in to be flagged.
pub const LOWEST_SHARE: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub ranks: RankTable,
    pub clustering: Clustering,
    /// Two-cluster partition used by the flagging rule.
    pub split: Clustering,
    pub comparisons: Vec<SiteComparison>,
    /// Members of the lowest of two clusters whose group ranks lowest in at
    /// least [`LOWEST_SHARE`] of its ranked periods.
    pub flagged: Vec<String>,
}

pub fn flag_stations(panel: &AlphaPanel, ranks: &RankTable, split: &Clustering) -> Vec<String> {
    split
        .lowest()
        .members
        .iter()
        .filter(|m| {
            let s = panel.position(m).expect("clustered stations come from the panel");
            ranks.lowest_share(&panel.groups[s]) >= LOWEST_SHARE
        })
        .cloned()
        .collect()
}

/// Ranks, `k`-cluster Ward partition, requested pairwise comparisons and
/// the flagged set.
pub fn detect(panel: &AlphaPanel, k: usize, pairs: &[(String, String)], z: f64) -> Result<DetectionReport> {
    let ranks = rank_groups(panel);
    let clustering = hierarchical_cluster(panel, k)?;
    let split = if k == 2 { clustering.clone() } else { hierarchical_cluster(panel, 2)? };
    let comparisons = pairs.iter().map(|(a, b)| compare_sites(panel, a, b, z)).collect::<Result<Vec<_>>>()?;
    let flagged = flag_stations(panel, &ranks, &split);
    Ok(DetectionReport { ranks, clustering, split, comparisons, flagged })
}
