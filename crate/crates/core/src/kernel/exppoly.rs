use crate::error::{Error, Result};
use crate::linalg::{permutation_sign, permutations};

use super::{check_inputs, index_values};

/// Exponents closer than this are merged and their coefficients summed.
pub const MERGE_TOL: f64 = 1e-12;

/// Half-width at which bracketed roots stop being bisected.
pub const ROOT_TOL: f64 = 1e-10;

/// `c -> sum_k d_k exp(b_k c)` with strictly ascending exponents `b_k`.
///
/// A nonzero exponential polynomial with `n` distinct exponents has at most
/// `n - 1` real roots.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpPoly {
    coeffs: Vec<f64>,
    exponents: Vec<f64>,
}

/// Roots found on an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct RootScan {
    pub roots: Vec<f64>,
    /// Tangential or endpoint zeros a sign scan cannot certify.
    pub possible_missed: bool,
    /// `ln max |P|` over the scan grid.
    pub log_max_abs: f64,
}

impl ExpPoly {
    pub fn new(coeffs: Vec<f64>, exponents: Vec<f64>) -> Result<Self> {
        if coeffs.len() != exponents.len() {
            return Err(Error::Shape("coefficients and exponents differ in length".into()));
        }
        if coeffs.iter().chain(&exponents).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exponential polynomial term".into()));
        }
        let mut terms: Vec<(f64, f64)> = exponents.into_iter().zip(coeffs).collect();
        terms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged_b: Vec<f64> = Vec::with_capacity(terms.len());
        let mut merged_d: Vec<f64> = Vec::with_capacity(terms.len());
        for (b, d) in terms {
            match merged_b.last() {
                Some(last) if b - last <= MERGE_TOL => *merged_d.last_mut().unwrap() += d,
                _ => {
                    merged_b.push(b);
                    merged_d.push(d);
                }
            }
        }
        Ok(ExpPoly { coeffs: merged_d, exponents: merged_b })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    /// Number of (merged) terms.
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|d| *d == 0.0)
    }

    /// Upper bound on the number of real roots.
    pub fn max_roots(&self) -> usize {
        self.coeffs.iter().filter(|d| **d != 0.0).count().saturating_sub(1)
    }

    fn shift(&self, c: f64) -> f64 {
        self.exponents
            .iter()
            .zip(&self.coeffs)
            .filter(|(_, d)| **d != 0.0)
            .map(|(b, _)| b * c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(mantissa, log_scale, magnitude)` with `P(c) = mantissa * exp(log_scale)`
    /// and `magnitude = sum_k |d_k| exp(b_k c - log_scale)`.
    pub fn eval_scaled(&self, c: f64) -> (f64, f64, f64) {
        let shift = self.shift(c);
        if shift == f64::NEG_INFINITY {
            return (0.0, 0.0, 0.0);
        }
        let mut value = 0.0;
        let mut magnitude = 0.0;
        for (b, d) in self.exponents.iter().zip(&self.coeffs) {
            let e = (b * c - shift).exp();
            value += d * e;
            magnitude += d.abs() * e;
        }
        (value, shift, magnitude)
    }

    pub fn eval(&self, c: f64) -> f64 {
        let (v, ls, _) = self.eval_scaled(c);
        if v == 0.0 {
            0.0
        } else {
            v * ls.exp()
        }
    }

    /// Sign-change scan on `grid` equispaced points of `[lo, hi]`, each
    /// bracket bisected down to [`ROOT_TOL`].
    pub fn roots(&self, lo: f64, hi: f64, grid: usize) -> Result<RootScan> {
        if !(lo < hi) {
            return Err(Error::Domain(format!("empty root interval [{lo}, {hi}]")));
        }
        if grid < 2 * self.len().max(1) {
            return Err(Error::Domain(format!("grid of {grid} points is too coarse")));
        }
        if self.is_zero() {
            return Err(Error::Degenerate("identically zero exponential polynomial".into()));
        }
        let noise = |v: f64, mag: f64| v.abs() <= 64.0 * f64::EPSILON * mag;
        let step = (hi - lo) / (grid - 1) as f64;
        let points: Vec<f64> = (0..grid).map(|i| if i + 1 == grid { hi } else { lo + step * i as f64 }).collect();
        let evals: Vec<(f64, f64, f64)> = points.iter().map(|c| self.eval_scaled(*c)).collect();
        let log_abs: Vec<f64> = evals.iter().map(|(v, ls, _)| v.abs().ln() + ls).collect();
        let log_max_abs = log_abs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let signs: Vec<i8> = evals
            .iter()
            .map(|(v, _, mag)| if noise(*v, *mag) { 0 } else if *v > 0.0 { 1 } else { -1 })
            .collect();

        let mut roots = Vec::new();
        let mut last: Option<usize> = None;
        for i in 0..grid {
            if signs[i] == 0 {
                if evals[i].0 == 0.0 && last.is_none() {
                    roots.push(points[i]);
                }
                continue;
            }
            if let Some(p) = last {
                if signs[p] != signs[i] {
                    roots.push(self.bisect(points[p], points[i], signs[p]));
                }
            }
            last = Some(i);
        }
        if let (Some(_), true) = (last, signs[grid - 1] == 0 && evals[grid - 1].0 == 0.0) {
            roots.push(hi);
        }
        roots.dedup_by(|a, b| (*a - *b).abs() <= 10.0 * ROOT_TOL);

        let small = |i: usize| log_abs[i] < log_max_abs + (1e-8f64).ln();
        let mut possible_missed = small(0) || small(grid - 1);
        for i in 1..grid - 1 {
            let local_min = log_abs[i] <= log_abs[i - 1] && log_abs[i] <= log_abs[i + 1];
            let no_change = signs[i - 1] == signs[i + 1] && signs[i - 1] != 0;
            if local_min && no_change && log_abs[i] < log_max_abs + (1e-6f64).ln() {
                possible_missed = true;
            }
        }
        Ok(RootScan { roots, possible_missed, log_max_abs })
    }

    fn bisect(&self, mut a: f64, mut b: f64, sign_a: i8) -> f64 {
        while b - a > ROOT_TOL {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            let v = self.eval_scaled(mid).0;
            if v == 0.0 {
                return mid;
            }
            if (v > 0.0) == (sign_a > 0) {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    }
}

/// `c -> sum_j a_j D_j(x; c beta0)` expanded as an exponential polynomial in
/// `c`: one term per period `t` and bijection of the remaining periods onto
/// the exponents, before merging equal exponents.
pub fn ray_poly(x: &[f64], k: usize, beta0: &[f64], a_weights: &[f64], lambda: &[f64]) -> Result<ExpPoly> {
    let periods = check_inputs(x, k, beta0, lambda)?;
    if a_weights.len() != lambda.len() || a_weights.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Domain("ray weights must be T - 1 positive numbers".into()));
    }
    let u = index_values(x, k, beta0);
    let mut sorted = u.clone();
    sorted.sort_by(f64::total_cmp);
    let spread = 1.0 + sorted.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if sorted.windows(2).any(|p| p[1] - p[0] <= 1e-12 * spread) {
        return Err(Error::Degenerate("index values x_t'beta0 are not distinct".into()));
    }
    let perms = permutations(periods - 1);
    let mut coeffs = Vec::with_capacity(periods * perms.len());
    let mut exponents = Vec::with_capacity(periods * perms.len());
    for t in 0..periods {
        let parity = if t % 2 == 0 { 1.0 } else { -1.0 };
        let base: f64 = a_weights.iter().zip(lambda).map(|(a, l)| a * (l * u[t]).exp()).sum();
        let retained: Vec<usize> = (0..periods).filter(|s| *s != t).collect();
        for p in &perms {
            exponents.push(retained.iter().zip(p).map(|(s, j)| lambda[*j] * u[*s]).sum());
            coeffs.push(parity * permutation_sign(p) * base);
        }
    }
    ExpPoly::new(coeffs, exponents)
}
