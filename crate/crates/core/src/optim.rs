//! Quasi-Newton minimization and finite-difference Hessians.

use nalgebra::{DMatrix, DVector};

use crate::error::{CmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop once an accepted step improves `f` by less than
    /// `reltol * (|f| + reltol)`.
    pub reltol: f64,
    pub max_iters: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            reltol: 1e-10,
            max_iters: 1000,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Point {
    t: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Objective failures inside the line search count as an infinite value so
/// the step is shortened.
fn probe<F>(f: &mut F, x0: &[f64], dir: &[f64], t: f64, evals: &mut usize) -> Point
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let x: Vec<f64> = x0.iter().zip(dir).map(|(a, b)| a + t * b).collect();
    *evals += 1;
    match f(&x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|e| e.is_finite()) => Point {
            t,
            f: v,
            d: dot(&g, dir),
            x,
            g,
        },
        _ => Point {
            t,
            f: f64::INFINITY,
            d: f64::NAN,
            x,
            g: Vec::new(),
        },
    }
}

fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.t.min(hi.t), lo.t.max(hi.t));
    let width = b - a;
    let mut t = f64::NAN;
    if hi.f.is_finite() && hi.d.is_finite() {
        // minimizer of the cubic through both end points
        let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (lo.t - hi.t);
        let disc = d1 * d1 - lo.d * hi.d;
        if disc >= 0.0 {
            let d2 = (hi.t - lo.t).signum() * disc.sqrt();
            t = hi.t - (hi.t - lo.t) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
        }
    } else if hi.f.is_finite() {
        // quadratic from lo's value and slope plus hi's value
        let dt = hi.t - lo.t;
        let curv = (hi.f - lo.f - lo.d * dt) / (dt * dt);
        if curv > 0.0 {
            t = lo.t - lo.d / (2.0 * curv);
        }
    }
    if !(t.is_finite() && t > a + 0.1 * width && t < b - 0.1 * width) {
        t = 0.5 * (a + b);
    }
    t
}

fn line_search<F>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    d0: f64,
    dir: &[f64],
    t_init: f64,
    opts: &BfgsOptions,
    evals: &mut usize,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let start = Point {
        t: 0.0,
        f: f0,
        d: d0,
        x: x0.to_vec(),
        g: Vec::new(),
    };
    let armijo = |p: &Point| p.f <= f0 + opts.c1 * p.t * d0;
    let curvature = |p: &Point| p.d.abs() <= -opts.c2 * d0;
    let mut prev = start;
    let mut t = t_init;
    let zoom = |f: &mut F, mut lo: Point, mut hi: Point, evals: &mut usize| -> Option<Point> {
        for _ in 0..60 {
            let t = interpolate(&lo, &hi);
            let p = probe(f, x0, dir, t, evals);
            if !armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if curvature(&p) {
                    return Some(p);
                }
                if p.d * (hi.t - lo.t) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
            if (hi.t - lo.t).abs() < 1e-16 * lo.t.abs().max(1.0) {
                break;
            }
        }
        // accept a sufficient-decrease point even without the curvature condition
        (lo.t > 0.0 && lo.f < f0).then_some(lo)
    };
    for i in 0..40 {
        let p = probe(f, x0, dir, t, evals);
        if !armijo(&p) || (i > 0 && p.f >= prev.f) {
            return zoom(f, prev, p, evals);
        }
        if curvature(&p) {
            return Some(p);
        }
        if p.d >= 0.0 {
            return zoom(f, p, prev, evals);
        }
        prev = p;
        t *= 2.0;
    }
    (prev.t > 0.0).then_some(prev)
}

/// BFGS with a strong-Wolfe line search.
pub fn bfgs<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    if !fx.is_finite() {
        return Err(CmmError::InvalidParameter(
            "objective is not finite at the start point".into(),
        ));
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    while iterations < opts.max_iters {
        if g.iter().all(|v| *v == 0.0) {
            converged = true;
            message = "zero gradient".into();
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        let mut d0 = dot(&dir, &g);
        if !(d0 < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            dir = g.iter().map(|v| -v).collect();
            d0 = dot(&dir, &g);
        }
        let t_init = if fresh {
            (1.0 / dir.iter().map(|v| v * v).sum::<f64>().sqrt()).min(1.0)
        } else {
            1.0
        };
        let step = line_search(&mut f, &x, fx, d0, &dir, t_init, opts, &mut evaluations);
        let Some(p) = step else {
            if fresh {
                message = "line search failed along steepest descent".into();
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        iterations += 1;
        let s = DVector::from_iterator(n, p.x.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, p.g.iter().zip(&g).map(|(a, b)| a - b));
        let f_prev = fx;
        x = p.x;
        fx = p.f;
        g = p.g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
        if f_prev - fx < opts.reltol * (fx.abs() + opts.reltol) {
            converged = true;
            message = "relative reduction below tolerance".into();
            break;
        }
    }
    Ok(BfgsResult {
        x,
        f: fx,
        g,
        iterations,
        evaluations,
        converged,
        message,
    })
}

/// Per-coordinate Hessian step.
pub fn hessian_step(v: f64) -> f64 {
    1e-4_f64.max(1e-4 * v.abs())
}

/// Number of objective evaluations [`numerical_hessian`] makes in dimension `d`.
pub fn hessian_evaluations(d: usize) -> usize {
    2 * d * d + 2 * d + 1
}

/// Central-difference Hessian: five-point stencil on the diagonal, four-point
/// cross differences off it. Uses exactly `2d^2 + 2d + 1` evaluations.
pub fn numerical_hessian<F>(mut f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = x.len();
    let h: Vec<f64> = x.iter().map(|v| hessian_step(*v)).collect();
    let mut w = x.to_vec();
    let f0 = f(&w)?;
    let mut hess = DMatrix::zeros(d, d);
    let mut eval = |w: &mut Vec<f64>, moves: &[(usize, f64)]| -> Result<f64> {
        for &(i, m) in moves {
            w[i] = x[i] + m;
        }
        let v = f(w);
        for &(i, _) in moves {
            w[i] = x[i];
        }
        v
    };
    for i in 0..d {
        let hi = h[i];
        let p1 = eval(&mut w, &[(i, hi)])?;
        let m1 = eval(&mut w, &[(i, -hi)])?;
        let p2 = eval(&mut w, &[(i, 2.0 * hi)])?;
        let m2 = eval(&mut w, &[(i, -2.0 * hi)])?;
        hess[(i, i)] = (-p2 + 16.0 * p1 - 30.0 * f0 + 16.0 * m1 - m2) / (12.0 * hi * hi);
    }
    for i in 0..d {
        for j in i + 1..d {
            let (hi, hj) = (h[i], h[j]);
            let pp = eval(&mut w, &[(i, hi), (j, hj)])?;
            let pm = eval(&mut w, &[(i, hi), (j, -hj)])?;
            let mp = eval(&mut w, &[(i, -hi), (j, hj)])?;
            let mm = eval(&mut w, &[(i, -hi), (j, -hj)])?;
            let v = (pp - pm - mp + mm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    for i in 0..d {
        for j in 0..d {
            if !hess[(i, j)].is_finite() {
                return Err(CmmError::InvalidParameter(format!(
                    "non-finite Hessian entry at ({i}, {j})"
                )));
            }
        }
    }
    Ok(hess)
}

/// Inverse of a symmetric positive definite matrix, with its condition
/// number (ratio of extreme eigenvalues).
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = max / min;
    if !(min > 0.0) || !(cond < 1e14) {
        return Err(CmmError::Singular(format!(
            "Hessian eigenvalues range over [{min:.3e}, {max:.3e}]"
        )));
    }
    let inv = m
        .clone()
        .cholesky()
        .ok_or_else(|| CmmError::Singular("Cholesky factorization failed".into()))?
        .inverse();
    Ok((inv, cond))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let opts = BfgsOptions {
            reltol: 1e-16,
            ..Default::default()
        };
        let r = bfgs(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.converged, "{}", r.message);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn accepted_iterates_never_increase() {
        let mut trace = Vec::new();
        let opts = BfgsOptions::default();
        let r = bfgs(
            |x: &[f64]| {
                let v = rosenbrock(x)?;
                trace.push((x.to_vec(), v.0));
                Ok(v)
            },
            &[-1.2, 1.0],
            &opts,
        )
        .unwrap();
        assert!(r.f <= trace[0].1);
    }

    #[test]
    fn quadratic_hessian() {
        let q = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0]);
        let mut calls = 0;
        let h = numerical_hessian(
            |x: &[f64]| {
                calls += 1;
                let v = DVector::from_column_slice(x);
                Ok(0.5 * v.dot(&(&q * &v)))
            },
            &[0.3, -1.0, 2.0],
        )
        .unwrap();
        assert_eq!(calls, hessian_evaluations(3));
        assert_eq!(hessian_evaluations(3), 25);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(h[(i, j)], q[(i, j)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn step_rule() {
        assert_eq!(hessian_step(0.0), 1e-4);
        assert_eq!(hessian_step(-50.0), 5e-3);
    }

    #[test]
    fn spd_inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(spd_inverse(&m), Err(CmmError::Singular(_))));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let (inv, cond) = spd_inverse(&m).unwrap();
        assert_abs_diff_eq!(inv[(1, 1)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(cond, 2.0, epsilon = 1e-12);
    }
}
