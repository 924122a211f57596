use hdgc::detect::{hierarchical_cluster, ward_linkage, AlphaPanel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Ward merge sequence by exhaustive search over all cluster pairs, using
/// the within-cluster sum-of-squares increase computed from scratch.
fn brute_force_heights(points: &DMatrix<f64>) -> Vec<f64> {
    let sse = |members: &[usize]| {
        let dim = points.ncols();
        let centroid: Vec<f64> =
            (0..dim).map(|j| members.iter().map(|&i| points[(i, j)]).sum::<f64>() / members.len() as f64).collect();
        members.iter().map(|&i| (0..dim).map(|j| (points[(i, j)] - centroid[j]).powi(2)).sum::<f64>()).sum::<f64>()
    };
    let mut clusters: Vec<Vec<usize>> = (0..points.nrows()).map(|i| vec![i]).collect();
    let mut heights = Vec::new();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let merged: Vec<usize> = clusters[a].iter().chain(&clusters[b]).copied().collect();
                let inc = sse(&merged) - sse(&clusters[a]) - sse(&clusters[b]);
                if inc < best.0 {
                    best = (inc, a, b);
                }
            }
        }
        let (inc, a, b) = best;
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        heights.push((2.0 * inc).sqrt());
    }
    heights
}

#[test]
fn lance_williams_matches_exhaustive_ward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let pts = DMatrix::from_fn(9, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let merges = ward_linkage(&pts);
        let oracle = brute_force_heights(&pts);
        for (m, h) in merges.iter().zip(&oracle) {
            assert!((m.height - h).abs() < 1e-10, "{} vs {h}", m.height);
        }
    }
}

fn two_group_panel(seed: u64) -> AlphaPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p) = (12, 12);
    let alpha = DMatrix::from_fn(n, p, |i, _| {
        let base = if i % 3 == 0 { 0.25 } else { 0.42 };
        base + 0.01 * rng.sample::<f64, _>(StandardNormal)
    });
    AlphaPanel::new(
        (0..n).map(|i| format!("site{i}")).collect(),
        vec![None; n],
        (0..p).map(|i| format!("season{i}")).collect(),
        alpha,
        DMatrix::from_element(n, p, 0.02),
        DMatrix::from_element(n, p, true),
    )
    .unwrap()
}

#[test]
fn separated_groups_are_recovered_exactly() {
    for seed in 0..10 {
        let c = hierarchical_cluster(&two_group_panel(seed), 2).unwrap();
        let low: Vec<String> = (0..12).step_by(3).map(|i| format!("site{i}")).collect();
        assert_eq!(c.lowest().members, low);
        assert!((c.summaries[0].mean - 0.25).abs() < 0.01);
        assert!((c.summaries[1].mean - 0.42).abs() < 0.01);
    }
}
