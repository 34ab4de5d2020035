//! Identification diagnostics.
//!
//! Ray scans locate the candidates `c beta0` at which the conditional moment
//! vanishes for every probe `x`; rejection scans test candidates through the
//! sign pattern of the `D_j` determinants. The remaining tools detect designs
//! without identifying power, build fixed-effect laws under which a second
//! point on the ray is observationally equivalent, summarize support
//! conditions and test `beta0 = 0`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dgp::{a_weights, DgpSpec, GammaLaw, PanelSample, XLaw};
use crate::error::{Error, Result};
use crate::glogit::GenLogistic;
use crate::kernel::{dj_det_scaled, dj_signs, in_rejection_set, index_values, moment_m, ray_poly};
use crate::rng::stream;

/// Tolerance for matching roots across probes.
pub const ROOT_MATCH_TOL: f64 = 1e-6;

/// Grid points per unit length of the scanned `c` interval (at least 2000 total).
const GRID_DENSITY: f64 = 1000.0;

/// Minimum number of switchers per cell in [`test_beta_zero`].
pub const MIN_CELL_SWITCHERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayScanReport {
    pub c_interval: (f64, f64),
    /// `(1/lambda_max, lambda_max)`.
    pub ray_interval: (f64, f64),
    /// Roots common to every valid probe.
    pub roots: Vec<f64>,
    pub inside: Vec<f64>,
    pub outside: Vec<f64>,
    pub per_x_roots: Vec<Vec<f64>>,
    /// Probes left out because their index values are not distinct.
    pub skipped_probes: Vec<usize>,
    /// Largest root count any probe polynomial allows.
    pub certified_max_roots: usize,
    pub flags: Vec<String>,
}

fn scan_grid(lo: f64, hi: f64, terms: usize) -> usize {
    (((hi - lo) * GRID_DENSITY) as usize).max(2000).max(2 * terms)
}

/// Roots in `c` of `sum_j a_j(x) D_j(x; c beta0)` per probe, intersected
/// across probes.
pub fn ray_scan(spec: &DgpSpec, probes: &[Vec<f64>], c_range: (f64, f64)) -> Result<RayScanReport> {
    let (lo, hi) = c_range;
    if !(lo < hi) {
        return Err(Error::Domain(format!("empty c interval [{lo}, {hi}]")));
    }
    if !spec.kernel_ready() {
        return Err(Error::Unsupported("ray scans need T = tau + 1".into()));
    }
    let k = spec.covariates();
    let lambda = spec.dist().lambda();
    let lmax = spec.dist().lambda_max();
    let mut flags = Vec::new();
    let mut per_x_roots = Vec::with_capacity(probes.len());
    let mut skipped = Vec::new();
    let mut certified: Option<usize> = None;
    for (i, x) in probes.iter().enumerate() {
        let a = a_weights(x, spec)?;
        let poly = match ray_poly(x, k, spec.beta0(), &a, lambda) {
            Ok(p) => p,
            Err(Error::Degenerate(_)) => {
                flags.push(format!("probe {i}: repeated index values, skipped"));
                skipped.push(i);
                per_x_roots.push(Vec::new());
                continue;
            }
            Err(e) => return Err(e),
        };
        let scan = poly.roots(lo, hi, scan_grid(lo, hi, poly.len()))?;
        let mut roots = scan.roots;
        if scan.possible_missed {
            flags.push(format!("probe {i}: possible tangential or endpoint roots"));
        }
        if lo < 1.0 && 1.0 < hi && !roots.iter().any(|r| (r - 1.0).abs() <= ROOT_MATCH_TOL) {
            let (v, _, mag) = poly.eval_scaled(1.0);
            if v.abs() <= 1e-9 * mag {
                flags.push(format!("probe {i}: root at c = 1 without sign change"));
                roots.push(1.0);
                roots.sort_by(f64::total_cmp);
            }
        }
        certified = Some(certified.map_or(poly.max_roots(), |c: usize| c.max(poly.max_roots())));
        per_x_roots.push(roots);
    }
    let valid: Vec<usize> = (0..probes.len()).filter(|i| !skipped.contains(i)).collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("no probe with distinct index values".into()));
    }
    let mut roots = Vec::new();
    for r in &per_x_roots[valid[0]] {
        let mut sum = *r;
        let mut all = true;
        for i in &valid[1..] {
            match per_x_roots[*i].iter().find(|s| (*s - r).abs() <= ROOT_MATCH_TOL) {
                Some(s) => sum += s,
                None => {
                    all = false;
                    break;
                }
            }
        }
        if all {
            roots.push(sum / valid.len() as f64);
        }
    }
    let ray_interval = (1.0 / lmax, lmax);
    let (inside, outside): (Vec<f64>, Vec<f64>) =
        roots.iter().partition(|r| **r > ray_interval.0 && **r < ray_interval.1);
    if !outside.is_empty() {
        flags.push("common roots outside the ray interval".into());
    }
    Ok(RayScanReport {
        c_interval: c_range,
        ray_interval,
        roots,
        inside,
        outside,
        per_x_roots,
        skipped_probes: skipped,
        certified_max_roots: certified.unwrap_or(0),
        flags,
    })
}

/// `(c, objective)` pairs where the objective is the mean over valid probes of
/// the squared ray polynomial normalized by the sum of its absolute terms.
pub fn ray_scan_curve(spec: &DgpSpec, probes: &[Vec<f64>], c_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let k = spec.covariates();
    let lambda = spec.dist().lambda();
    let mut polys = Vec::new();
    for x in probes {
        let a = a_weights(x, spec)?;
        match ray_poly(x, k, spec.beta0(), &a, lambda) {
            Ok(p) => polys.push(p),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if polys.is_empty() {
        return Err(Error::Degenerate("no probe with distinct index values".into()));
    }
    Ok(c_grid
        .iter()
        .map(|c| {
            let obj = polys
                .iter()
                .map(|p| {
                    let (v, _, mag) = p.eval_scaled(*c);
                    if mag > 0.0 {
                        (v / mag).powi(2)
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / polys.len() as f64;
            (*c, obj)
        })
        .collect())
}

/// Up to `count` probes from the spec's X law with distinct index values. A
/// finite support contributes all its qualifying points.
pub fn default_probes(spec: &DgpSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let k = spec.covariates();
    let distinct = |x: &[f64]| {
        let mut u = index_values(x, k, spec.beta0());
        u.sort_by(f64::total_cmp);
        let spread = 1.0 + u.iter().map(|v| v.abs()).fold(0.0, f64::max);
        u.windows(2).all(|p| p[1] - p[0] > 1e-9 * spread)
    };
    if let Some(support) = spec.support() {
        return support.iter().filter(|(x, p)| *p > 0.0 && distinct(x)).map(|(x, _)| x.to_vec()).collect();
    }
    let mut rng = stream(seed, 0);
    let mut out = Vec::with_capacity(count);
    let mut x = vec![0.0; spec.periods() * k];
    for _ in 0..count * 100 {
        if out.len() == count {
            break;
        }
        match spec.xlaw() {
            XLaw::IidUniform { lo, hi } => x.iter_mut().for_each(|v| *v = rng.random_range(*lo..=*hi)),
            XLaw::IidGaussian { mean, sd } => {
                x.iter_mut().for_each(|v| *v = mean + sd * rng.sample::<f64, _>(StandardNormal))
            }
            XLaw::FiniteSupport { .. } => unreachable!(),
        }
        if distinct(&x) {
            out.push(x.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionVerdict {
    pub candidate: Vec<f64>,
    pub rejected: bool,
    /// First probe found in the rejection set.
    pub witness: Option<usize>,
}

/// A candidate is rejected when some probe lies in its rejection set.
pub fn rejection_scan(candidates: &[Vec<f64>], spec: &DgpSpec, probes: &[Vec<f64>]) -> Result<Vec<RejectionVerdict>> {
    let k = spec.covariates();
    let lambda = spec.dist().lambda();
    candidates
        .iter()
        .map(|b| {
            let mut witness = None;
            for (i, x) in probes.iter().enumerate() {
                if in_rejection_set(x, k, b, spec.beta0(), lambda)? {
                    witness = Some(i);
                    break;
                }
            }
            Ok(RejectionVerdict { candidate: b.clone(), rejected: witness.is_some(), witness })
        })
        .collect()
}

/// A probe with `x_0'b = x_1'b` and `x_0'beta0 != x_1'beta0`; the other rows
/// are random. Needs `b` off the line spanned by `beta0`.
pub fn tie_probe(b: &[f64], beta0: &[f64], periods: usize, seed: u64) -> Result<Vec<f64>> {
    let k = b.len();
    if beta0.len() != k || periods < 2 {
        return Err(Error::Shape("tie probe needs b and beta0 of equal length and T >= 2".into()));
    }
    let bb: f64 = b.iter().map(|v| v * v).sum();
    if bb == 0.0 {
        return Err(Error::Domain("b must be nonzero".into()));
    }
    let proj: f64 = b.iter().zip(beta0).map(|(u, v)| u * v).sum::<f64>() / bb;
    let d: Vec<f64> = beta0.iter().zip(b).map(|(v, u)| v - proj * u).collect();
    let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b0n: f64 = beta0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dn <= 1e-8 * b0n {
        return Err(Error::Domain("b lies on the line spanned by beta0".into()));
    }
    let mut rng = stream(seed, 1);
    let mut draw = || rng.sample::<f64, _>(StandardNormal);
    for _ in 0..1000 {
        let mut x: Vec<f64> = (0..periods * k).map(|_| draw()).collect();
        for c in 0..k {
            x[k + c] = x[c] + d[c] / dn;
        }
        let ub = index_values(&x, k, b);
        let u0 = index_values(&x, k, beta0);
        let mut ok = (u0[0] - u0[1]).abs() > 1e-6;
        for s in 0..periods {
            for t in s + 1..periods {
                if (s, t) != (0, 1) {
                    ok &= (ub[s] - ub[t]).abs() > 1e-3 && (u0[s] - u0[t]).abs() > 1e-3;
                }
            }
        }
        if ok {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence("could not draw a tie probe".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegeneracyReport {
    /// Probability (or sample frequency) of `T` pairwise distinct covariate rows.
    pub prob_distinct: f64,
    /// Whether `prob_distinct` is exact rather than a sample frequency.
    pub exact: bool,
    pub no_identification_power: bool,
    /// Trajectories with a tie on which the kernel structure was checked.
    pub tied_checked: usize,
    pub candidates_checked: usize,
    /// Largest violation of `m(e_s) = -m(e_t)`, `m(e_r) = 0` relative to `max |M|`.
    pub max_violation: f64,
    pub cancellation_holds: bool,
    pub verdict: String,
}

fn rows_distinct(x: &[f64], k: usize) -> bool {
    let periods = x.len() / k;
    (0..periods).all(|s| (s + 1..periods).all(|t| x[s * k..(s + 1) * k] != x[t * k..(t + 1) * k]))
}

fn first_tie(x: &[f64], k: usize) -> Option<(usize, usize)> {
    let periods = x.len() / k;
    (0..periods).find_map(|s| (s + 1..periods).find(|t| x[s * k..(s + 1) * k] == x[t * k..(t + 1) * k]).map(|t| (s, t)))
}

/// Worst relative violation of the tie cancellation structure.
fn tie_violation(x: &[f64], k: usize, b: &[f64], lambda: &[f64]) -> Result<f64> {
    let Some((s, t)) = first_tie(x, k) else { return Ok(0.0) };
    let periods = x.len() / k;
    let unit = |r: usize| -> Vec<u8> { (0..periods).map(|q| (q == r) as u8).collect() };
    let m: Vec<f64> = (0..periods)
        .map(|r| moment_m(&unit(r), x, k, b, lambda).map(|e| e.stab_value))
        .collect::<Result<_>>()?;
    let scale = m.iter().map(|v| v.abs()).fold(f64::MIN_POSITIVE, f64::max);
    let mut worst = (m[s] + m[t]).abs() / scale;
    for (r, v) in m.iter().enumerate() {
        if r != s && r != t {
            worst = worst.max(v.abs() / scale);
        }
    }
    Ok(worst)
}

fn degeneracy_report(
    prob_distinct: f64,
    exact: bool,
    tied: &[&[f64]],
    k: usize,
    lambda: &[f64],
    seed: u64,
) -> Result<DegeneracyReport> {
    let mut rng = stream(seed, 2);
    let candidates = 20;
    let mut worst: f64 = 0.0;
    for _ in 0..candidates {
        let b: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        for x in tied {
            worst = worst.max(tie_violation(x, k, &b, lambda)?);
        }
    }
    let none = prob_distinct == 0.0;
    let holds = worst <= 1e-12;
    let verdict = if none {
        "no identification power: covariate rows are never pairwise distinct".to_string()
    } else if prob_distinct < 1.0 {
        format!("tied trajectories carry no information; {prob_distinct:.4} of the mass has distinct rows")
    } else {
        "covariate rows are pairwise distinct with probability one".to_string()
    };
    Ok(DegeneracyReport {
        prob_distinct,
        exact,
        no_identification_power: none,
        tied_checked: tied.len(),
        candidates_checked: candidates,
        max_violation: worst,
        cancellation_holds: holds,
        verdict,
    })
}

/// Degeneracy of a specification. Continuous i.i.d. covariates have distinct
/// rows with probability one.
pub fn degenerate_check_spec(spec: &DgpSpec, seed: u64) -> Result<DegeneracyReport> {
    let k = spec.covariates();
    let lambda = spec.dist().lambda();
    if !spec.kernel_ready() {
        return Err(Error::Unsupported("degeneracy checks need T = tau + 1".into()));
    }
    match spec.support() {
        Some(support) => {
            let prob: f64 = support.iter().filter(|(x, _)| rows_distinct(x, k)).map(|(_, p)| p).sum();
            let tied: Vec<&[f64]> = support.iter().filter(|(x, _)| !rows_distinct(x, k)).map(|(x, _)| *x).collect();
            degeneracy_report(prob, true, &tied, k, lambda, seed)
        }
        None => degeneracy_report(1.0, true, &[], k, lambda, seed),
    }
}

/// Degeneracy of an observed sample; at most 5000 tied units are checked.
pub fn degenerate_check_sample(sample: &PanelSample, lambda: &[f64], seed: u64) -> Result<DegeneracyReport> {
    let k = sample.covariates();
    if lambda.len() + 1 != sample.periods() {
        return Err(Error::Shape("kernel needs T - 1 exponents".into()));
    }
    let n = sample.n();
    let distinct = (0..n).filter(|i| rows_distinct(sample.unit_x(*i), k)).count();
    let tied: Vec<&[f64]> =
        (0..n).map(|i| sample.unit_x(i)).filter(|x| !rows_distinct(x, k)).take(5000).collect();
    degeneracy_report(distinct as f64 / n as f64, false, &tied, k, lambda, seed)
}

/// Fixed effect `gamma0` at which a point mass makes `E[m(Y, X; b) | X = x] = 0`
/// for `T = 3`: `gamma0 = ln(w_1 R / w_2) / (lambda_2 - 1)` with
/// `R = -D_1(x; b) / D_2(x; b) > 0`.
pub fn adversarial_gamma(x: &[f64], k: usize, b: &[f64], beta0: &[f64], dist: &GenLogistic) -> Result<f64> {
    let lambda = dist.lambda();
    if lambda.len() != 2 || x.len() != 3 * k {
        return Err(Error::Unsupported("adversarial fixed effects are built for T = 3, tau = 2".into()));
    }
    let w = dist.w();
    if !(w[1] > 0.0) {
        return Err(Error::Domain("w_2 must be positive".into()));
    }
    let signs = dj_signs(x, k, b, beta0, lambda)?;
    if signs[0] == 0 || signs[0] != -signs[1] {
        return Err(Error::Domain(format!("D_1 and D_2 do not have strictly opposite signs ({signs:?})")));
    }
    let (v1, ls1, _) = dj_det_scaled(x, k, b, beta0, lambda, 0)?;
    let (v2, ls2, _) = dj_det_scaled(x, k, b, beta0, lambda, 1)?;
    Ok(gamma_from_log_ratio((-v1 / v2).ln() + ls1 - ls2, dist))
}

/// `ln(w_1 R / w_2) / (lambda_2 - 1)` from `ln R`.
pub fn gamma_from_log_ratio(log_ratio: f64, dist: &GenLogistic) -> f64 {
    let (w, lambda) = (dist.w(), dist.lambda());
    (w[0].ln() + log_ratio - w[1].ln()) / (lambda[1] - 1.0)
}

/// Spec with the given X support and a per-point Dirac fixed effect under
/// which `b = c beta0` satisfies the conditional moment restriction.
pub fn build_nonidentified_dgp(b: &[f64], beta0: &[f64], dist: &GenLogistic, xlaw: &XLaw) -> Result<DgpSpec> {
    let XLaw::FiniteSupport { points } = xlaw else {
        return Err(Error::Unsupported("non-identified designs need a finite_support X law".into()));
    };
    let lambda = dist.lambda();
    if lambda.len() != 2 {
        return Err(Error::Unsupported("non-identified designs are built for T = 3, tau = 2".into()));
    }
    let k = beta0.len();
    let bb0: f64 = beta0.iter().map(|v| v * v).sum();
    if bb0 == 0.0 || b.len() != k {
        return Err(Error::Domain("beta0 must be nonzero and match b in length".into()));
    }
    let c = b.iter().zip(beta0).map(|(u, v)| u * v).sum::<f64>() / bb0;
    let resid: f64 = b.iter().zip(beta0).map(|(u, v)| (u - c * v).powi(2)).sum::<f64>().sqrt();
    if resid > 1e-10 * bb0.sqrt() {
        return Err(Error::Domain("b is not on the ray through beta0".into()));
    }
    let l2 = lambda[1];
    if !(c > 1.0 / l2 && c < l2) {
        return Err(Error::Domain(format!("c = {c} outside ({}, {l2})", 1.0 / l2)));
    }
    let mut cells = Vec::with_capacity(points.len());
    for p in points {
        let x = p.x.concat();
        if x.len() != 3 * k {
            return Err(Error::Shape("support points must be 3 x K".into()));
        }
        let signs = dj_signs(&x, k, b, beta0, lambda)?;
        let g = if signs.iter().all(|s| *s == 0) { 0.0 } else { adversarial_gamma(&x, k, b, beta0, dist)? };
        cells.push(vec![(g, 1.0)]);
    }
    DgpSpec::new(beta0.to_vec(), 3, dist.clone(), GammaLaw::DiscreteMixture { cells }, xlaw.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateSupport {
    pub k: usize,
    /// Frequency of `x_{k,.}` pairwise distinct with all other covariates zero.
    pub event_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportReport {
    pub per_covariate: Vec<CovariateSupport>,
    /// Frequency of period pairs with `|x_s - x_t| < bandwidth`.
    pub overlap_freq: f64,
    pub bandwidth: f64,
}

/// Report-only summary of the support conditions.
pub fn check_support_assumptions(
    sample: &PanelSample,
    k_focus: Option<usize>,
    bandwidth: Option<f64>,
) -> Result<SupportReport> {
    let k = sample.covariates();
    let periods = sample.periods();
    let n = sample.n();
    let focus: Vec<usize> = match k_focus {
        Some(c) if c < k => vec![c],
        Some(c) => return Err(Error::Shape(format!("covariate {c} out of range for K = {k}"))),
        None => (0..k).collect(),
    };
    let per_covariate = focus
        .iter()
        .map(|&c| {
            let hits = (0..n)
                .filter(|i| {
                    let x = sample.unit_x(*i);
                    let others_zero = (0..periods).all(|t| (0..k).all(|o| o == c || x[t * k + o] == 0.0));
                    let vals: Vec<f64> = (0..periods).map(|t| x[t * k + c]).collect();
                    others_zero && (0..periods).all(|s| (s + 1..periods).all(|t| vals[s] != vals[t]))
                })
                .count();
            CovariateSupport { k: c, event_freq: hits as f64 / n as f64 }
        })
        .collect();
    let bandwidth = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(_) => return Err(Error::Domain("bandwidth must be positive".into())),
        None => {
            let xs = sample.x();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            0.1 * sd.max(f64::MIN_POSITIVE) * (k as f64).sqrt()
        }
    };
    let mut close = 0usize;
    let mut pairs = 0usize;
    for i in 0..n {
        let x = sample.unit_x(i);
        for s in 0..periods {
            for t in s + 1..periods {
                let d: f64 = (0..k).map(|c| (x[s * k + c] - x[t * k + c]).powi(2)).sum::<f64>().sqrt();
                pairs += 1;
                close += (d < bandwidth) as usize;
            }
        }
    }
    Ok(SupportReport { per_covariate, overlap_freq: close as f64 / pairs as f64, bandwidth })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroTest {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
    pub bins: usize,
    pub switchers: usize,
    /// Smallest over largest eigenvalue of `E[(x_t - x_t')(x_t - x_t')']`.
    pub eigen_ratio: f64,
    pub rank_check: bool,
}

/// Cell-based chi-square test of `P(Y_t = 1 | Y_t + Y_t' = 1, X_t, X_t') = 1/2`.
/// Cells are products of per-coordinate quantile bins of `(x_t, x_t')` among
/// switchers; `bins` is lowered until every non-empty cell has at least
/// [`MIN_CELL_SWITCHERS`] switchers.
pub fn test_beta_zero(sample: &PanelSample, t: usize, t_prime: usize, bins: usize) -> Result<ZeroTest> {
    let periods = sample.periods();
    let k = sample.covariates();
    if t >= periods || t_prime >= periods || t == t_prime {
        return Err(Error::Shape(format!("invalid period pair ({t}, {t_prime}) for T = {periods}")));
    }
    if bins == 0 {
        return Err(Error::Domain("bins must be positive".into()));
    }
    let n = sample.n();
    let mut second = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let x = sample.unit_x(i);
        let d: Vec<f64> = (0..k).map(|c| x[t * k + c] - x[t_prime * k + c]).collect();
        for a in 0..k {
            for b in 0..k {
                second[(a, b)] += d[a] * d[b] / n as f64;
            }
        }
    }
    let eig = second.symmetric_eigenvalues();
    let (min, max) = (eig.min(), eig.max());
    let eigen_ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(max > 0.0 && min > 1e-8 * max) {
        return Err(Error::Singular { what: "E[(x_t - x_t')(x_t - x_t')']".into(), cond: 1.0 / eigen_ratio });
    }
    let coords = 2 * k;
    let switchers: Vec<(Vec<f64>, bool)> = (0..n)
        .filter_map(|i| {
            let y = sample.unit_y(i);
            if y[t] + y[t_prime] != 1 {
                return None;
            }
            let x = sample.unit_x(i);
            let mut z = x[t * k..(t + 1) * k].to_vec();
            z.extend_from_slice(&x[t_prime * k..(t_prime + 1) * k]);
            Some((z, y[t] == 1))
        })
        .collect();
    let ns = switchers.len();
    if ns < MIN_CELL_SWITCHERS {
        return Err(Error::InsufficientData(format!("{ns} switchers, need at least {MIN_CELL_SWITCHERS}")));
    }
    let mut sorted: Vec<Vec<f64>> = (0..coords).map(|c| switchers.iter().map(|s| s.0[c]).collect()).collect();
    sorted.iter_mut().for_each(|v| v.sort_by(f64::total_cmp));
    for b in (1..=bins).rev() {
        let cuts: Vec<Vec<f64>> = sorted
            .iter()
            .map(|v| (1..b).map(|j| v[(j * ns / b).min(ns - 1)]).collect::<Vec<f64>>())
            .collect();
        let mut cells: BTreeMap<Vec<usize>, (usize, usize)> = BTreeMap::new();
        for (z, up) in &switchers {
            let key: Vec<usize> = z.iter().zip(&cuts).map(|(v, c)| c.partition_point(|q| q < v)).collect();
            let e = cells.entry(key).or_insert((0, 0));
            e.0 += 1;
            e.1 += *up as usize;
        }
        if b > 1 && cells.values().any(|(cnt, _)| *cnt < MIN_CELL_SWITCHERS) {
            continue;
        }
        let statistic: f64 = cells
            .values()
            .map(|(cnt, s)| {
                let nn = *cnt as f64;
                (*s as f64 - nn / 2.0).powi(2) / (nn / 4.0)
            })
            .sum();
        let df = cells.len();
        let chi = ChiSquared::new(df as f64).map_err(|e| Error::Domain(e.to_string()))?;
        return Ok(ZeroTest {
            statistic,
            p_value: chi.sf(statistic),
            df,
            bins: b,
            switchers: ns,
            eigen_ratio,
            rank_check: true,
        });
    }
    unreachable!("a single bin always qualifies")
}
