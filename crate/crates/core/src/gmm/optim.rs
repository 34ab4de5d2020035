//! BFGS with Armijo backtracking, falling back to Nelder-Mead when the line
//! search stalls.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Tolerances {
    pub grad: f64,
    pub step: f64,
    pub max_iter: usize,
    /// Points farther than this from the origin count as divergence.
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
    pub diverged: bool,
    pub nelder_mead: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Minimizes `f` from `x0`. `fg` returns the value and gradient, `None` where
/// the objective is undefined.
pub(crate) fn minimize<F>(mut fg: F, x0: &[f64], tol: Tolerances) -> Minimum
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let Some((mut f, g)) = fg(x0) else {
        return Minimum { x: x0.to_vec(), f: f64::INFINITY, converged: false, diverged: true, nelder_mead: false };
    };
    let mut g = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut resets = 0;
    let mut fresh = true;
    for _ in 0..tol.max_iter {
        if g.amax() <= tol.grad {
            return done(x, f, true, false);
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = -g.norm_squared();
            fresh = true;
        }
        // steepest-descent steps are capped at a unit move
        let mut alpha = if fresh { 1.0 / dir.amax().max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = &x + alpha * &dir;
            if let Some((ft, gt)) = fg(trial.as_slice()) {
                if ft.is_finite() && ft < f && ft <= f + ARMIJO * alpha * slope {
                    accepted = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if resets == 0 {
                resets += 1;
                h = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            return nelder_mead(|p| fg(p).map(|v| v.0), x.as_slice(), f, tol);
        };
        fresh = false;
        let s = &xn - &x;
        let y = &gn - &g;
        let step_small = s.amax() <= tol.step * (1.0 + x.amax());
        x = xn;
        let f_old = f;
        f = fnew;
        g = gn;
        if x.amax() > tol.radius {
            return done(x, f, false, true);
        }
        if step_small || (f_old - f).abs() <= f64::EPSILON * f.abs().max(f64::MIN_POSITIVE) {
            let converged = g.amax() <= tol.grad.sqrt() || step_small;
            return done(x, f, converged, false);
        }
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
    }
    done(x, f, false, false)
}

fn done(x: DVector<f64>, f: f64, converged: bool, diverged: bool) -> Minimum {
    Minimum { x: x.as_slice().to_vec(), f, converged, diverged, nelder_mead: false }
}

fn nelder_mead<F>(mut f: F, x0: &[f64], f0: f64, tol: Tolerances) -> Minimum
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let n = x0.len();
    let eval = |f: &mut F, p: &[f64]| f(p).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += 0.05 * (1.0 + x0[i].abs());
        let v = eval(&mut f, &p);
        simplex.push((p, v));
    }
    let budget = tol.max_iter.max(200 * n);
    for _ in 0..budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-14 * (best.abs() + 1e-300) || size <= tol.step * (1.0 + simplex[0].0.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            let (x, f) = simplex.swap_remove(0);
            return Minimum { x, f, converged: true, diverged: false, nelder_mead: true };
        }
        let centroid: Vec<f64> = (0..n).map(|i| simplex[..n].iter().map(|(p, _)| p[i]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let fr = eval(&mut f, &xr);
        if fr < best {
            let xe = along(2.0);
            let fe = eval(&mut f, &xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let p = along(0.5);
                let v = eval(&mut f, &p);
                (p, v)
            } else {
                let p = along(-0.5);
                let v = eval(&mut f, &p);
                (p, v)
            };
            if fc < worst.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for (p, v) in simplex.iter_mut().skip(1) {
                    for (a, b) in p.iter_mut().zip(&x0) {
                        *a = b + 0.5 * (*a - b);
                    }
                    *v = eval(&mut f, p);
                }
            }
        }
        if simplex.iter().any(|(p, _)| p.iter().fold(0.0f64, |m, v| m.max(v.abs())) > tol.radius) {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (x, f) = simplex.swap_remove(0);
            return Minimum { x, f, converged: false, diverged: true, nelder_mead: true };
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    Minimum { x, f, converged: false, diverged: false, nelder_mead: true }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: Tolerances = Tolerances { grad: 1e-10, step: 1e-12, max_iter: 500, radius: 1e6 };

    fn rosenbrock(p: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (p[0], p[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Some((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let m = minimize(rosenbrock, &[-1.2, 1.0], TOL);
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn quadratic_in_few_steps() {
        let m = minimize(|p| Some((p[0] * p[0] + 10.0 * p[1] * p[1], vec![2.0 * p[0], 20.0 * p[1]])), &[3.0, -2.0], TOL);
        assert!(m.converged && m.f < 1e-16);
    }

    #[test]
    fn falls_back_on_bad_gradient() {
        // gradient sign is wrong, so every line search fails
        let m = minimize(|p| Some(((p[0] - 2.0).powi(2), vec![-(p[0] - 2.0)])), &[0.0], TOL);
        assert!(m.nelder_mead);
        assert!((m.x[0] - 2.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn reports_divergence() {
        let m = minimize(|p| Some((-p[0], vec![-1.0])), &[0.0], Tolerances { radius: 100.0, ..TOL });
        assert!(m.diverged && !m.converged);
    }
}
