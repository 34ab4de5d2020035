//! The determinant moment kernel.
//!
//! For a trajectory with index values `a_s = x_s'beta` (`s = 0..T`) and known
//! exponents `lambda` (length `T-1`, `lambda[0] = 1`), the period-`t` weight is
//!
//! ```text
//! M_t = (-1)^t det[ exp(lambda_j a_s) ]_{j < T-1, s != t}      (t counted from 0)
//! ```
//!
//! and `m(y, x; beta) = M_t` when `y` is the single-spell trajectory with its
//! one success in period `t`, `0` otherwise. Its conditional mean given
//! `(x, gamma)` vanishes at the true `beta` for every shock law in the family.
//!
//! All determinants are evaluated on index values centered by their mean over
//! the `T` periods, so every `M_t` of a trajectory shares the positive factor
//! `exp(mean(a) * sum(lambda))`, reported separately as `log_scale`.
//!
//! Periods `t` and determinant rows `j` are zero-based throughout.

mod exppoly;

pub use exppoly::{ray_poly, ExpPoly, RootScan};

use crate::error::{Error, Result};
use crate::linalg::{det, hadamard_bound};

/// Largest panel length accepted by the determinant routines.
pub const MAX_PERIODS: usize = 6;

/// Relative cutoff below which a `D_j` counts as zero against the largest one.
pub const SIGN_REL_TOL: f64 = 1e-10;
/// Cutoff against Hadamard's bound of the same determinant.
pub const SIGN_HADAMARD_TOL: f64 = 1e-12;

/// One unit's outcomes and covariates; `x` is row-major `T x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    y: Vec<u8>,
    x: Vec<f64>,
    k: usize,
}

impl Trajectory {
    pub fn new(y: Vec<u8>, x: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Shape("K must be at least 1".into()));
        }
        if y.len() < 2 || x.len() != y.len() * k {
            return Err(Error::Shape(format!(
                "trajectory with {} outcomes needs {} covariate values, got {}",
                y.len(),
                y.len() * k,
                x.len()
            )));
        }
        check_binary(&y)?;
        Ok(Trajectory { y, x, k })
    }

    pub fn periods(&self) -> usize {
        self.y.len()
    }

    pub fn covariates(&self) -> usize {
        self.k
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * self.k..(t + 1) * self.k]
    }

    pub fn moment(&self, beta: &[f64], lambda: &[f64]) -> Result<MomentEval> {
        moment_m(&self.y, &self.x, self.k, beta, lambda)
    }
}

/// A kernel evaluation in raw and stabilized form.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEval {
    /// `m(y, x; beta)`; infinite if the raw scale overflows.
    pub value: f64,
    /// `m` with the common factor `exp(log_scale)` removed.
    pub stab_value: f64,
    pub log_scale: f64,
    /// Gradient of `stab_value` in `beta`, centering included.
    pub grad: Vec<f64>,
}

pub(crate) fn check_binary(y: &[u8]) -> Result<()> {
    match y.iter().find(|v| **v > 1) {
        Some(v) => Err(Error::Domain(format!("outcome {v} is not binary"))),
        None => Ok(()),
    }
}

/// Validates shapes and returns `T`.
pub(crate) fn check_inputs(x: &[f64], k: usize, beta: &[f64], lambda: &[f64]) -> Result<usize> {
    if k == 0 || x.len() % k != 0 {
        return Err(Error::Shape(format!("{} covariate values do not split into K = {k}", x.len())));
    }
    let periods = x.len() / k;
    if periods < 2 {
        return Err(Error::Shape("at least two periods are required".into()));
    }
    if periods > MAX_PERIODS {
        return Err(Error::TooManyPeriods(periods));
    }
    if beta.len() != k {
        return Err(Error::Shape(format!("beta has {} entries, K = {k}", beta.len())));
    }
    if lambda.len() + 1 != periods {
        return Err(Error::Shape(format!(
            "kernel needs T - 1 = {} exponents, got {}",
            periods - 1,
            lambda.len()
        )));
    }
    if lambda[0] != 1.0 || lambda.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidDistribution(
            "lambda must start at 1 and be strictly ascending".into(),
        ));
    }
    Ok(periods)
}

/// `a_s = x_s'beta` for every period.
pub fn index_values(x: &[f64], k: usize, beta: &[f64]) -> Vec<f64> {
    x.chunks(k).map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("index value x'beta is not finite".into()))
    }
}

/// Position of the single success if `y` has exactly one.
pub fn single_spell(y: &[u8]) -> Option<usize> {
    let mut found = None;
    for (t, v) in y.iter().enumerate() {
        if *v == 1 {
            if found.is_some() {
                return None;
            }
            found = Some(t);
        }
    }
    found
}

/// Stabilized `M_t` from index values. When `grad` is given it receives the
/// gradient in `beta` of the stabilized value (length `K`).
pub(crate) fn stab_mt(
    idx: &[f64],
    x: &[f64],
    k: usize,
    t: usize,
    lambda: &[f64],
    grad: Option<&mut [f64]>,
) -> (f64, f64) {
    let periods = idx.len();
    let n = periods - 1;
    let abar = idx.iter().sum::<f64>() / periods as f64;
    let log_scale = abar * lambda.iter().sum::<f64>();
    let mut cols = [0usize; MAX_PERIODS];
    let mut c = 0;
    for s in (0..periods).filter(|s| *s != t) {
        cols[c] = s;
        c += 1;
    }
    let mut e = [0.0; 25];
    for j in 0..n {
        for c in 0..n {
            e[j * n + c] = (lambda[j] * (idx[cols[c]] - abar)).exp();
        }
    }
    let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
    let value = sign * det(&e[..n * n], n);
    if let Some(grad) = grad {
        let mut tmp = [0.0; 25];
        for kk in 0..k {
            let xbar = (0..periods).map(|s| x[s * k + kk]).sum::<f64>() / periods as f64;
            let mut g = 0.0;
            for j in 0..n {
                tmp[..n * n].copy_from_slice(&e[..n * n]);
                for c in 0..n {
                    tmp[j * n + c] *= lambda[j] * (x[cols[c] * k + kk] - xbar);
                }
                g += det(&tmp[..n * n], n);
            }
            grad[kk] = sign * g;
        }
    }
    (value, log_scale)
}

/// `M_t(x; beta)` as `(stab_value, log_scale)`; the raw value is
/// `stab_value * exp(log_scale)`.
pub fn mt_det(x: &[f64], k: usize, beta: &[f64], t: usize, lambda: &[f64]) -> Result<(f64, f64)> {
    let periods = check_inputs(x, k, beta, lambda)?;
    if t >= periods {
        return Err(Error::Shape(format!("period {t} out of range for T = {periods}")));
    }
    let idx = index_values(x, k, beta);
    check_finite(&idx)?;
    Ok(stab_mt(&idx, x, k, t, lambda, None))
}

/// `m(y, x; beta)` with its stabilized form and gradient.
pub fn moment_m(y: &[u8], x: &[f64], k: usize, beta: &[f64], lambda: &[f64]) -> Result<MomentEval> {
    let periods = check_inputs(x, k, beta, lambda)?;
    if y.len() != periods {
        return Err(Error::Shape(format!("{} outcomes for T = {periods}", y.len())));
    }
    check_binary(y)?;
    let idx = index_values(x, k, beta);
    check_finite(&idx)?;
    let mut grad = vec![0.0; k];
    match single_spell(y) {
        Some(t) => {
            let (stab, log_scale) = stab_mt(&idx, x, k, t, lambda, Some(&mut grad));
            Ok(MomentEval { value: stab * log_scale.exp(), stab_value: stab, log_scale, grad })
        }
        None => {
            let log_scale = idx.iter().sum::<f64>() / periods as f64 * lambda.iter().sum::<f64>();
            Ok(MomentEval { value: 0.0, stab_value: 0.0, log_scale, grad })
        }
    }
}

/// Gradient of the raw `m(y, x; beta)` in `beta`.
pub fn grad_m(y: &[u8], x: &[f64], k: usize, beta: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    let eval = moment_m(y, x, k, beta, lambda)?;
    if single_spell(y).is_none() {
        return Ok(eval.grad);
    }
    let periods = y.len();
    let lambda_sum: f64 = lambda.iter().sum();
    let scale = eval.log_scale.exp();
    Ok((0..k)
        .map(|kk| {
            let xbar = (0..periods).map(|s| x[s * k + kk]).sum::<f64>() / periods as f64;
            scale * (eval.grad[kk] + eval.stab_value * xbar * lambda_sum)
        })
        .collect())
}

/// Stabilized `D_j(x; b)`: `(stab_value, log_scale, hadamard)` where the raw
/// determinant is `stab_value * exp(log_scale)` and `hadamard` bounds
/// `|stab_value|`.
pub fn dj_det_scaled(
    x: &[f64],
    k: usize,
    b: &[f64],
    beta0: &[f64],
    lambda: &[f64],
    j: usize,
) -> Result<(f64, f64, f64)> {
    let periods = check_inputs(x, k, b, lambda)?;
    if beta0.len() != k {
        return Err(Error::Shape("beta0 and b differ in length".into()));
    }
    if j + 1 >= periods {
        return Err(Error::Shape(format!("row index {j} out of range for T = {periods}")));
    }
    let a0 = index_values(x, k, beta0);
    let ab = index_values(x, k, b);
    check_finite(&a0)?;
    check_finite(&ab)?;
    let mean0 = a0.iter().sum::<f64>() / periods as f64;
    let meanb = ab.iter().sum::<f64>() / periods as f64;
    let n = periods;
    let mut m = [0.0; 36];
    for s in 0..n {
        m[s] = (lambda[j] * (a0[s] - mean0)).exp();
    }
    for i in 1..n {
        for s in 0..n {
            m[i * n + s] = (lambda[i - 1] * (ab[s] - meanb)).exp();
        }
    }
    let value = det(&m[..n * n], n);
    let log_scale = lambda[j] * mean0 + meanb * lambda.iter().sum::<f64>();
    Ok((value, log_scale, hadamard_bound(&m[..n * n], n)))
}

/// `D_j(x; b)`: the `T x T` determinant whose first row is
/// `exp(lambda_j x_s'beta0)` and whose remaining rows are `exp(lambda_i x_s'b)`.
pub fn dj_det(x: &[f64], k: usize, b: &[f64], beta0: &[f64], lambda: &[f64], j: usize) -> Result<f64> {
    let (v, ls, _) = dj_det_scaled(x, k, b, beta0, lambda, j)?;
    Ok(v * ls.exp())
}

/// Signs of all `D_j(x; b)` with near-zeros mapped to 0.
pub fn dj_signs(x: &[f64], k: usize, b: &[f64], beta0: &[f64], lambda: &[f64]) -> Result<Vec<i8>> {
    let evals = (0..lambda.len())
        .map(|j| dj_det_scaled(x, k, b, beta0, lambda, j))
        .collect::<Result<Vec<_>>>()?;
    let common = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = evals.iter().map(|(v, ls, _)| v * (ls - common).exp()).collect();
    let largest = scaled.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(evals
        .iter()
        .zip(&scaled)
        .map(|((v, _, had), s)| {
            if s.abs() <= SIGN_REL_TOL * largest || v.abs() <= SIGN_HADAMARD_TOL * had {
                0
            } else if *s > 0.0 {
                1
            } else {
                -1
            }
        })
        .collect())
}

/// Whether `x` belongs to the rejection set of candidate `b`: at least one
/// `D_j(x; b)` is nonzero and all nonzero ones share a sign.
pub fn in_rejection_set(x: &[f64], k: usize, b: &[f64], beta0: &[f64], lambda: &[f64]) -> Result<bool> {
    let signs = dj_signs(x, k, b, beta0, lambda)?;
    let pos = signs.iter().any(|s| *s > 0);
    let neg = signs.iter().any(|s| *s < 0);
    Ok(pos != neg)
}
