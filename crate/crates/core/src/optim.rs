//! Bound-constrained ascent: BFGS with a backtracking line search, switching to
//! Newton steps on the analytic Hessian once the gradient is small and the
//! Hessian is negative definite.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct Options {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Per-coordinate lower bounds (`-inf` for none).
    pub lower: Vec<f64>,
    /// Gradient norm below which Newton steps are attempted.
    pub newton_switch: f64,
    /// Largest step (Euclidean) allowed per iteration.
    pub max_step: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub at_bound: bool,
    pub message: String,
}

/// What the objective returns at a point.
pub(crate) struct Point {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn project(x: &mut DVector<f64>, lower: &[f64]) {
    for (v, &lo) in x.iter_mut().zip(lower) {
        if *v < lo {
            *v = lo;
        }
    }
}

/// Gradient with components zeroed where the bound is active and the ascent
/// direction points outside.
fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, lower: &[f64]) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        if x[i] <= lower[i] && g[i] < 0.0 {
            0.0
        } else {
            g[i]
        }
    })
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    // ascent: solve (−H) d = g, needs −H positive definite
    let neg = -h;
    let chol = neg.cholesky()?;
    Some(chol.solve(g))
}

pub(crate) fn maximize<F>(mut f: F, x0: DVector<f64>, opts: &Options) -> Result<Outcome>
where
    F: FnMut(&DVector<f64>) -> Result<Point>,
{
    let n = x0.len();
    let mut x = x0;
    project(&mut x, &opts.lower);
    let mut cur = f(&x)?;
    let mut inv = DMatrix::<f64>::identity(n, n);
    let mut fresh_inverse = true;
    let mut message = String::from("iteration limit reached");

    for iter in 0..opts.max_iter {
        let pg = projected_gradient(&x, &cur.gradient, &opts.lower);
        let gnorm = pg.norm();
        if !gnorm.is_finite() {
            message = "non-finite gradient".into();
            return Ok(finish(x, &cur, gnorm, iter, false, &opts.lower, message));
        }
        if gnorm < opts.grad_tol {
            return Ok(finish(x, &cur, gnorm, iter, true, &opts.lower, "converged".into()));
        }

        let newton = if gnorm < opts.newton_switch {
            newton_direction(&cur.hessian, &cur.gradient)
        } else {
            None
        };
        let is_newton = newton.is_some();
        let mut d = newton.unwrap_or_else(|| &inv * &pg);
        // freeze coordinates pinned at their bound
        for i in 0..n {
            if x[i] <= opts.lower[i] && d[i] < 0.0 {
                d[i] = 0.0;
            }
        }
        if pg.dot(&d) <= 0.0 {
            inv = DMatrix::identity(n, n);
            fresh_inverse = true;
            d = pg.clone();
        }
        let dn = d.norm();
        if dn > opts.max_step {
            d *= opts.max_step / dn;
        }

        let slope = pg.dot(&d);
        let mut step = 1.0;
        let mut accepted: Option<(DVector<f64>, Point)> = None;
        for _ in 0..60 {
            let mut trial = &x + &d * step;
            project(&mut trial, &opts.lower);
            if let Ok(p) = f(&trial) {
                if p.value.is_finite() && p.value >= cur.value + 1e-4 * step * slope {
                    accepted = Some((trial, p));
                    break;
                }
                // near the optimum the value is flat to rounding; a gradient
                // reduction on a full Newton step is progress enough
                if is_newton && step == 1.0 {
                    let pg_new = projected_gradient(&trial, &p.gradient, &opts.lower);
                    if p.value.is_finite()
                        && pg_new.norm() < 0.5 * gnorm
                        && p.value >= cur.value - 1e-12 * cur.value.abs().max(1.0)
                    {
                        accepted = Some((trial, p));
                        break;
                    }
                }
            }
            step *= 0.5;
        }

        let Some((x_new, p_new)) = accepted else {
            if !fresh_inverse {
                inv = DMatrix::identity(n, n);
                fresh_inverse = true;
                continue;
            }
            message = format!("line search failed (gradient norm {gnorm:.3e})");
            return Ok(finish(x, &cur, gnorm, iter, false, &opts.lower, message));
        };

        let s = &x_new - &x;
        // curvature pair for the minimization of −f
        let y = -(&p_new.gradient - &cur.gradient);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh_inverse {
                // Shanno–Phua scaling of the initial inverse
                inv = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            inv = &left * &inv * &right + &s * s.transpose() * rho;
            fresh_inverse = false;
        }

        let small_step = s.norm() < opts.step_tol * (1.0 + x.norm());
        x = x_new;
        cur = p_new;
        if small_step {
            let pg = projected_gradient(&x, &cur.gradient, &opts.lower);
            let gnorm = pg.norm();
            let converged = gnorm < opts.grad_tol;
            let msg = if converged {
                "converged".to_string()
            } else {
                format!("step below tolerance with gradient norm {gnorm:.3e}")
            };
            return Ok(finish(x, &cur, gnorm, iter + 1, converged, &opts.lower, msg));
        }
    }
    let pg = projected_gradient(&x, &cur.gradient, &opts.lower);
    let gnorm = pg.norm();
    let converged = gnorm < opts.grad_tol;
    if converged {
        message = "converged".into();
    }
    Ok(finish(x, &cur, gnorm, opts.max_iter, converged, &opts.lower, message))
}

fn finish(
    x: DVector<f64>,
    cur: &Point,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    lower: &[f64],
    message: String,
) -> Outcome {
    let at_bound = x.iter().zip(lower).any(|(v, lo)| v <= lo);
    Outcome {
        value: cur.value,
        x,
        grad_norm,
        iterations,
        converged,
        at_bound,
        message,
    }
}

/// Gradient and Hessian in transformed coordinates `η` given those in natural
/// coordinates `θ(η)`, for a coordinatewise transform with `dθ/dη = jac` and
/// `d²θ/dη² = curv`.
pub(crate) fn chain_rule(
    jac: &DVector<f64>,
    curv: &DVector<f64>,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = jac.len();
    let g = grad.component_mul(jac);
    let mut h = DMatrix::from_fn(n, n, |i, j| jac[i] * hess[(i, j)] * jac[j]);
    for i in 0..n {
        h[(i, i)] += curv[i] * grad[i];
    }
    (g, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(n: usize) -> Options {
        Options {
            max_iter: 500,
            grad_tol: 1e-10,
            step_tol: 1e-15,
            lower: vec![f64::NEG_INFINITY; n],
            newton_switch: 1e-2,
            max_step: 2.0,
        }
    }

    #[test]
    fn maximizes_negative_rosenbrock() {
        let out = maximize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let value = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
                let gradient = DVector::from_vec(vec![
                    2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                    -200.0 * (b - a * a),
                ]);
                let hessian = DMatrix::from_row_slice(
                    2,
                    2,
                    &[-2.0 + 400.0 * b - 1200.0 * a * a, 400.0 * a, 400.0 * a, -200.0],
                );
                Ok(Point { value, gradient, hessian })
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &opts(2),
        )
        .unwrap();
        assert!(out.converged, "{}", out.message);
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn respects_lower_bound() {
        let mut o = opts(1);
        o.lower = vec![0.5];
        // maximum of −(x+1)² is at −1, outside the box
        let out = maximize(
            |x| {
                Ok(Point {
                    value: -(x[0] + 1.0).powi(2),
                    gradient: DVector::from_element(1, -2.0 * (x[0] + 1.0)),
                    hessian: DMatrix::from_element(1, 1, -2.0),
                })
            },
            DVector::from_element(1, 3.0),
            &o,
        )
        .unwrap();
        assert!(out.at_bound);
        assert!(out.converged);
        assert_eq!(out.x[0], 0.5);
    }
}
