//! Derivative-free Nelder-Mead simplex minimizer with box bounds.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    pub scale: f64,
    pub max_evals: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

impl NelderMead {
    /// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
    ///
    /// Points are clamped into the box. Non-finite objective values are
    /// treated as `+inf`. Returns `None` if every initial vertex is
    /// non-finite.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], lower: &[f64], upper: &[f64]) -> Option<Minimum>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let dim = x0.len();
        let clamp = |x: &mut Vec<f64>| {
            for i in 0..dim {
                x[i] = x[i].clamp(lower[i], upper[i]);
            }
        };
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut start = x0.to_vec();
        clamp(&mut start);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        let v0 = eval(&start, &mut evals);
        simplex.push((start.clone(), v0));
        for i in 0..dim {
            let mut x = start.clone();
            x[i] += self.scale;
            if x[i] > upper[i] {
                x[i] = start[i] - self.scale;
            }
            clamp(&mut x);
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }
        if simplex.iter().all(|(_, v)| !v.is_finite()) {
            return None;
        }

        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[dim].1;
            let size = simplex[1..]
                .iter()
                .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if (worst - best).abs() <= self.tol && size <= self.tol {
                break;
            }

            let centroid: Vec<f64> =
                (0..dim).map(|i| simplex[..dim].iter().map(|(x, _)| x[i]).sum::<f64>() / dim as f64).collect();
            let along = |t: f64| -> Vec<f64> {
                let mut x: Vec<f64> = (0..dim).map(|i| centroid[i] + t * (simplex[dim].0[i] - centroid[i])).collect();
                clamp(&mut x);
                x
            };

            let xr = along(-REFLECT);
            let fr = eval(&xr, &mut evals);
            if fr < best {
                let xe = along(-EXPAND);
                let fe = eval(&xe, &mut evals);
                simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[dim - 1].1 {
                simplex[dim] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < worst {
                let x = along(-CONTRACT);
                let v = eval(&x, &mut evals);
                (x, v)
            } else {
                let x = along(CONTRACT);
                let v = eval(&x, &mut evals);
                (x, v)
            };
            if fc < worst.min(fr) {
                simplex[dim] = (xc, fc);
                continue;
            }
            let x_best = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                let mut x: Vec<f64> = (0..dim).map(|i| x_best[i] + SHRINK * (vertex.0[i] - x_best[i])).collect();
                clamp(&mut x);
                let v = eval(&x, &mut evals);
                *vertex = (x, v);
            }
        }

        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Some(Minimum { x, value, evals })
    }
}
