//! Small dense Levenberg–Marquardt solver for weighted least squares.
//!
//! The caller supplies whitened residuals `r = √w (y − f)` and the whitened
//! Jacobian `J = √w ∂f/∂p`. Convergence is declared when every component of
//! the gradient, measured in units of the parameter's curvature scale
//! `|Jᵀr|_j / √(JᵀJ)_jj`, falls below the tolerance.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Optional per-parameter lower bounds; steps are projected onto them.
    pub lower_bounds: Option<Vec<f64>>,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            lower_bounds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub chi2: f64,
    /// `JᵀJ` at the returned parameters.
    pub normal: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub scaled_gradient: f64,
}

impl LmOutcome {
    /// `(JᵀJ)⁻¹`, symmetrised.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let c = self.normal.clone().try_inverse()?;
        Some(0.5 * (&c + c.transpose()))
    }
}

/// Largest gradient component in curvature units, ignoring components that
/// push an active lower bound further out.
fn scaled_gradient(jtj: &DMatrix<f64>, g: &DVector<f64>, p: &DVector<f64>, lower: &Option<Vec<f64>>) -> f64 {
    (0..g.len())
        .map(|j| {
            if let Some(lb) = lower {
                if p[j] <= lb[j] && g[j] < 0.0 {
                    return 0.0;
                }
            }
            let d = jtj[(j, j)].sqrt();
            if d > 0.0 {
                g[j].abs() / d
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

fn project(p: &mut DVector<f64>, lower: &Option<Vec<f64>>) {
    if let Some(lb) = lower {
        for (v, b) in p.iter_mut().zip(lb) {
            if *v < *b {
                *v = *b;
            }
        }
    }
}

/// Minimise `|r(p)|²` starting from `start`.
///
/// `eval` returns `(r, J)` or `None` when `p` is outside the model's domain.
pub fn minimize<F>(mut eval: F, start: DVector<f64>, options: &LmOptions) -> Option<LmOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)>,
{
    let mut p = start;
    project(&mut p, &options.lower_bounds);
    let (mut r, mut jac) = eval(&p)?;
    let mut chi2 = r.norm_squared();
    let mut lambda = 1e-3;
    let n = p.len();

    for iteration in 0..options.max_iterations {
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let sg = scaled_gradient(&jtj, &g, &p, &options.lower_bounds);
        if sg < options.gradient_tolerance {
            return Some(LmOutcome {
                params: p,
                chi2,
                normal: jtj,
                iterations: iteration,
                converged: true,
                scaled_gradient: sg,
            });
        }

        // Parameters sitting on a bound with the gradient pointing outward are
        // held fixed for this step.
        let active: Vec<bool> = (0..n)
            .map(|j| {
                options
                    .lower_bounds
                    .as_ref()
                    .is_some_and(|lb| p[j] <= lb[j] && g[j] < 0.0)
            })
            .collect();
        let mut rhs = g.clone();
        let mut accepted = false;
        while lambda < 1e20 {
            let mut a = jtj.clone();
            for j in 0..n {
                a[(j, j)] += lambda * jtj[(j, j)].max(1e-300);
            }
            for j in (0..n).filter(|&j| active[j]) {
                for k in 0..n {
                    a[(j, k)] = 0.0;
                    a[(k, j)] = 0.0;
                }
                a[(j, j)] = 1.0;
                rhs[j] = 0.0;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = &p + &step;
            project(&mut trial, &options.lower_bounds);
            if let Some((tr, tj)) = eval(&trial) {
                let tc = tr.norm_squared();
                if tc.is_finite() && tc <= chi2 {
                    let unchanged = trial == p;
                    p = trial;
                    r = tr;
                    jac = tj;
                    chi2 = tc;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = !unchanged;
                    break;
                }
            }
            lambda *= 10.0;
        }

        if !accepted {
            // No downhill step exists at working precision: this is the minimum
            // the arithmetic can resolve.
            let jtj = jac.transpose() * &jac;
            let g = jac.transpose() * &r;
            let sg = scaled_gradient(&jtj, &g, &p, &options.lower_bounds);
            return Some(LmOutcome {
                params: p,
                chi2,
                normal: jtj,
                iterations: iteration + 1,
                converged: sg < options.gradient_tolerance.sqrt(),
                scaled_gradient: sg,
            });
        }
    }

    let jtj = jac.transpose() * &jac;
    let g = jac.transpose() * &r;
    let sg = scaled_gradient(&jtj, &g, &p, &options.lower_bounds);
    Some(LmOutcome {
        params: p,
        chi2,
        normal: jtj,
        iterations: options.max_iterations,
        converged: sg < options.gradient_tolerance,
        scaled_gradient: sg,
    })
}

/// Outcome of [`fit_reweighted`].
#[derive(Debug, Clone)]
pub struct ReweightedOutcome {
    pub lm: LmOutcome,
    /// Both the inner solve and the weight fixed point converged.
    pub converged: bool,
    pub iterations: usize,
}

/// Iteratively reweighted least squares for averaged-periodogram data.
///
/// `model(p, k, grad)` returns the model at bin `k` and writes `∂m/∂p` into
/// `grad`. Weights are `n_avg / m²` at the current parameters; the loop stops
/// once a full solve moves no parameter by more than 10⁻⁶ of its standard
/// error.
pub fn fit_reweighted<M>(
    model: M,
    y: &[f64],
    n_avg: f64,
    start: DVector<f64>,
    options: &LmOptions,
    max_rounds: usize,
) -> Option<ReweightedOutcome>
where
    M: Fn(&DVector<f64>, usize, &mut [f64]) -> f64,
{
    let n = y.len();
    let dim = start.len();
    let mut grad = vec![0.0; dim];
    let mut p = start;
    let mut total = 0;
    let mut last = None;
    for _ in 0..max_rounds.max(1) {
        let sw: Vec<f64> = (0..n)
            .map(|k| {
                let m = model(&p, k, &mut grad);
                (n_avg / (m * m)).sqrt()
            })
            .collect();
        let out = minimize(
            |q| {
                let mut r = DVector::zeros(n);
                let mut j = DMatrix::zeros(n, dim);
                let mut g = vec![0.0; dim];
                for k in 0..n {
                    let m = model(q, k, &mut g);
                    if !(m > 0.0) {
                        return None;
                    }
                    r[k] = sw[k] * (y[k] - m);
                    for (c, gc) in g.iter().enumerate() {
                        j[(k, c)] = sw[k] * gc;
                    }
                }
                Some((r, j))
            },
            p.clone(),
            options,
        )?;
        total += out.iterations;
        let moved = match out.covariance() {
            Some(c) => (0..dim)
                .map(|j| {
                    let s = c[(j, j)].sqrt();
                    if s > 0.0 {
                        (out.params[j] - p[j]).abs() / s
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max),
            None => f64::INFINITY,
        };
        p = out.params.clone();
        let done = out.converged && moved < 1e-6;
        last = Some(out);
        if done {
            return Some(ReweightedOutcome {
                lm: last.unwrap(),
                converged: true,
                iterations: total,
            });
        }
    }
    Some(ReweightedOutcome {
        lm: last?,
        converged: false,
        iterations: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_exponential_decay() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * (-1.3 * x).exp() + 0.2).collect();
        let out = minimize(
            |p| {
                let r = DVector::from_iterator(
                    xs.len(),
                    xs.iter().zip(&ys).map(|(x, y)| y - (p[0] * (-p[1] * x).exp() + p[2])),
                );
                let mut j = DMatrix::zeros(xs.len(), 3);
                for (i, x) in xs.iter().enumerate() {
                    let e = (-p[1] * x).exp();
                    j[(i, 0)] = e;
                    j[(i, 1)] = -p[0] * x * e;
                    j[(i, 2)] = 1.0;
                }
                Some((r, j))
            },
            DVector::from_vec(vec![1.0, 0.5, 0.0]),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.params[0] - 2.5).abs() < 1e-8);
        assert!((out.params[1] - 1.3).abs() < 1e-8);
        assert!((out.params[2] - 0.2).abs() < 1e-8);
    }

    #[test]
    fn respects_lower_bounds() {
        // Minimum of (p - (-1))² constrained to p >= 0 sits on the bound.
        let out = minimize(
            |p| Some((DVector::from_vec(vec![-1.0 - p[0]]), DMatrix::from_vec(1, 1, vec![1.0]))),
            DVector::from_vec(vec![2.0]),
            &LmOptions {
                lower_bounds: Some(vec![0.0]),
                ..LmOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.params[0], 0.0);
        assert!(out.converged);
    }
}
