//! BFGS quasi-Newton minimizer with a strong Wolfe line search.
//!
//! The objective returns `None` where it is undefined (e.g. the implied
//! covariance loses positive definiteness); the line search treats such points
//! as infeasible and backs off. Accepted steps always decrease the objective.

use nalgebra::{DMatrix, DVector};

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 60;

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub grad_tol: f64,
    pub f_tol: f64,
    pub max_iter: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-6, f_tol: 1e-10, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_iter_reached: bool,
}

struct LinePoint {
    alpha: f64,
    f: f64,
    dphi: f64,
    x: DVector<f64>,
    grad: DVector<f64>,
}

pub fn bfgs<F>(mut objective: F, x0: DVector<f64>, opts: &OptimOptions) -> Option<OptimOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut f, mut grad) = objective(&x0)?;
    let mut x = x0;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first = true;

    for iter in 0..opts.max_iter {
        if grad.amax() < opts.grad_tol {
            return Some(OptimOutcome { x, f, grad, iterations: iter, converged: true, max_iter_reached: false });
        }
        let mut dir = -(&hinv * &grad);
        let mut dphi0 = dir.dot(&grad);
        if dphi0 >= 0.0 {
            // curvature information went bad; restart from steepest descent
            hinv = DMatrix::identity(n, n);
            dir = -grad.clone();
            dphi0 = dir.dot(&grad);
        }

        let ls = line_search(&mut objective, &x, f, dphi0, &dir)?;
        let s = &ls.x - &x;
        let y = &ls.grad - &grad;
        let f_prev = f;
        x = ls.x;
        f = ls.f;
        grad = ls.grad;

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                let scale = sy / y.dot(&y);
                hinv = DMatrix::identity(n, n) * scale;
                first = false;
            }
            let rho = 1.0 / sy;
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            hinv = hinv - (&hys + hys.transpose()) * rho + &ss * (rho * rho * yhy + rho);
        }

        // a stalled objective with a near-zero gradient counts as converged
        let denom = f_prev.abs().max(1.0);
        if (f_prev - f).abs() / denom < opts.f_tol && grad.amax() < opts.grad_tol.max(1e-4) {
            return Some(OptimOutcome { x, f, grad, iterations: iter + 1, converged: true, max_iter_reached: false });
        }
    }
    let converged = grad.amax() < opts.grad_tol;
    Some(OptimOutcome {
        x,
        f,
        grad,
        iterations: opts.max_iter,
        converged,
        max_iter_reached: !converged,
    })
}

/// Strong Wolfe line search (bracket + zoom). Returns the accepted point, or
/// `None` when no feasible decrease exists along `dir`.
fn line_search<F>(
    objective: &mut F,
    x0: &DVector<f64>,
    f0: f64,
    dphi0: f64,
    dir: &DVector<f64>,
) -> Option<LinePoint>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut evals = 0;
    let mut probe = |alpha: f64, evals: &mut usize| -> Option<LinePoint> {
        *evals += 1;
        let x = x0 + dir * alpha;
        let (f, grad) = objective(&x)?;
        let dphi = grad.dot(dir);
        Some(LinePoint { alpha, f, dphi, x, grad })
    };

    let mut alpha = 1.0;
    let mut prev: Option<LinePoint> = None;
    let mut prev_alpha = 0.0;
    let mut prev_f = f0;
    let mut prev_dphi = dphi0;

    while evals < MAX_LINE_EVALS {
        match probe(alpha, &mut evals) {
            None => {
                // infeasible: back off toward the last good point
                alpha = 0.5 * (prev_alpha + alpha);
                if alpha < 1e-16 {
                    return None;
                }
                continue;
            }
            Some(pt) => {
                if pt.f > f0 + WOLFE_C1 * pt.alpha * dphi0 || (prev.is_some() && pt.f >= prev_f) {
                    return zoom(objective, x0, f0, dphi0, dir, prev_alpha, prev_f, prev_dphi, pt, &mut evals);
                }
                if pt.dphi.abs() <= -WOLFE_C2 * dphi0 {
                    return Some(pt);
                }
                if pt.dphi >= 0.0 {
                    // slope turned positive: the minimum is bracketed with the
                    // previous (lower) point on the far side
                    let hi = match prev {
                        Some(p) => p,
                        None => LinePoint {
                            alpha: prev_alpha,
                            f: prev_f,
                            dphi: prev_dphi,
                            x: x0.clone(),
                            grad: DVector::zeros(0),
                        },
                    };
                    return zoom(objective, x0, f0, dphi0, dir, pt.alpha, pt.f, pt.dphi, hi, &mut evals);
                }
                prev_alpha = pt.alpha;
                prev_f = pt.f;
                prev_dphi = pt.dphi;
                prev = Some(pt);
                alpha *= 2.0;
            }
        }
    }
    prev
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    objective: &mut F,
    x0: &DVector<f64>,
    f0: f64,
    dphi0: f64,
    dir: &DVector<f64>,
    mut lo_alpha: f64,
    mut lo_f: f64,
    mut lo_dphi: f64,
    mut hi: LinePoint,
    evals: &mut usize,
) -> Option<LinePoint>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut best: Option<LinePoint> = None;
    while *evals < MAX_LINE_EVALS {
        // bisection with a mild bias toward lo keeps this robust near the
        // feasibility boundary
        let alpha = 0.5 * (lo_alpha + hi.alpha);
        if (hi.alpha - lo_alpha).abs() < 1e-16 {
            break;
        }
        *evals += 1;
        let x = x0 + dir * alpha;
        let Some((f, grad)) = objective(&x) else {
            hi = LinePoint { alpha, f: f64::INFINITY, dphi: 0.0, x, grad: DVector::zeros(0) };
            continue;
        };
        let dphi = grad.dot(dir);
        let pt = LinePoint { alpha, f, dphi, x, grad };
        if pt.f > f0 + WOLFE_C1 * alpha * dphi0 || pt.f >= lo_f {
            hi = pt;
        } else {
            if pt.dphi.abs() <= -WOLFE_C2 * dphi0 {
                return Some(pt);
            }
            if pt.dphi * (hi.alpha - lo_alpha) >= 0.0 {
                hi = LinePoint { alpha: lo_alpha, f: lo_f, dphi: lo_dphi, x: DVector::zeros(0), grad: DVector::zeros(0) };
            }
            lo_alpha = pt.alpha;
            lo_f = pt.f;
            lo_dphi = pt.dphi;
            best = Some(pt);
        }
    }
    // Wolfe curvature was not certified; accept the best sufficient-decrease
    // point so the outer loop can continue making progress.
    if let Some(pt) = best {
        if pt.f < f0 {
            return Some(pt);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl() {
        let out = bfgs(
            |x| Some((x.dot(x), 2.0 * x.clone())),
            DVector::from_vec(vec![3.0, -4.0]),
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!(out.f < 1e-12);
    }

    #[test]
    fn rosenbrock() {
        let out = bfgs(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = DVector::from_vec(vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ]);
                Some((f, g))
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(out.converged, "grad norm {}", out.grad.amax());
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn respects_infeasible_region() {
        // minimize -log(x) + x, undefined for x <= 0; minimum at x = 1
        let out = bfgs(
            |x| {
                if x[0] <= 0.0 {
                    None
                } else {
                    Some((-x[0].ln() + x[0], DVector::from_vec(vec![-1.0 / x[0] + 1.0])))
                }
            },
            DVector::from_vec(vec![4.0]),
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn max_iter_reported() {
        let opts = OptimOptions { max_iter: 2, ..Default::default() };
        let out = bfgs(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = DVector::from_vec(vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ]);
                Some((f, g))
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &opts,
        )
        .unwrap();
        assert!(out.max_iter_reached);
        assert!(!out.converged);
    }
}
