//! Small dense quasi-Newton minimizer used for variance-component search.

#[derive(Debug, Clone)]
pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    /// Relative objective change treated as converged.
    pub ftol: f64,
    /// Absolute infinity-norm gradient treated as converged.
    pub gtol: f64,
    /// Largest step (Euclidean) taken in a single line search.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-8,
            gtol: 1e-9,
            max_step: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsOutcome {
    pub x: Vec<f64>,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn reset(h: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
}

type Trial = (Vec<f64>, f64, Vec<f64>);

/// Backtracking Armijo search along `dir`.
fn line_search<F>(f: &mut F, x: &[f64], dir: &[f64], fx: f64, slope: f64, max_step: f64) -> Option<Trial>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let norm = dot(dir, dir).sqrt();
    let mut step = if norm > max_step { max_step / norm } else { 1.0 };
    for _ in 0..60 {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        let (ft, gt) = f(&trial);
        if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
            return Some((trial, ft, gt));
        }
        step *= 0.5;
    }
    None
}

/// Minimizes `f` with BFGS and a backtracking Armijo line search. `f`
/// returns the objective and its gradient; non-finite values are treated as
/// infeasible and shrink the step.
pub(crate) fn minimize_bfgs<F>(mut f: F, x0: Vec<f64>, opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    // inverse Hessian approximation, row-major
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut converged = false;
    let mut small_changes = 0;
    let mut iterations = 0;
    let mut last_rel = f64::INFINITY;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        if inf_norm(&g) <= opts.gtol {
            converged = true;
            break;
        }
        let mut dir: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>())
            .collect();
        let mut slope = dot(&dir, &g);
        let mut steepest = false;
        if !(slope < 0.0) {
            // lost positive definiteness; restart from steepest descent
            reset(&mut h, n);
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
            steepest = true;
        }
        let mut accepted = line_search(&mut f, &x, &dir, fx, slope, opts.max_step);
        if accepted.is_none() && !steepest {
            reset(&mut h, n);
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
            accepted = line_search(&mut f, &x, &dir, fx, slope, opts.max_step);
        }
        let Some((xn, fnew, gn)) = accepted else {
            // no descent possible at machine precision
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if iter == 0 {
                let scale = sy / dot(&y, &y);
                for v in h.iter_mut() {
                    *v *= scale;
                }
            }
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
                .collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        last_rel = (fx - fnew).abs() / (1.0 + fx.abs());
        x = xn;
        fx = fnew;
        g = gn;
        if last_rel < 1e-15 {
            small_changes += 1;
            if small_changes >= 3 {
                converged = true;
                break;
            }
        } else {
            small_changes = 0;
        }
    }
    if !converged && (inf_norm(&g) <= opts.gtol || last_rel < opts.ftol) {
        converged = true;
    }
    BfgsOutcome {
        x,

        grad: g,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let out = minimize_bfgs(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ];
                (f, g)
            },
            vec![-1.2, 1.0],
            &BfgsOptions {
                max_iter: 500,
                ..Default::default()
            },
        );
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }
}
