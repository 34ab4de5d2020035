//! Two-step GMM on the unconditional moments `E[g(X) m(Y, X; beta)] = 0`.
//!
//! The estimator works with the stabilized kernel divided by `||beta||^d`,
//! `d = (T-1)(T-2)/2`, the order at which the stabilized kernel vanishes as
//! `beta -> 0`.
//!
//! Step 1 minimizes the identity-weighted objective with basis instruments
//! from a grid of starts plus random starts. Each distinct minimum then fixes
//! the step-2 weight (or the estimated or oracle optimal instruments), which
//! is minimized from that minimum and from every start. Step-2 minima are
//! ranked by the overidentification statistic of the basis moments.

mod design;
mod instruments;
mod optim;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dgp::{DgpSpec, PanelSample};
use crate::error::{Error, Result};
use crate::rng::stream;
use design::Design;
pub use instruments::{
    basis_instruments, basis_width, cell_optimal_instruments, oracle_instruments, CellSummary, Instruments, MAX_CELLS,
    MIN_CELL_SIZE,
};
use rand::Rng as _;

/// Starts whose minima lie within this relative distance are merged.
pub const CLUSTER_TOL: f64 = 1e-3;
/// Step-1 clusters carried into step 2.
pub const MAX_CLUSTERS: usize = 8;
/// Condition number above which the weight matrix is flagged.
pub const WEIGHT_COND_LIMIT: f64 = 1e12;
/// Grid starts are skipped above this many covariates.
pub const MAX_GRID_COVARIATES: usize = 6;
/// Minima are reported while `J <= max(ratio * J_best, chi2_{df, 0.999})`.
pub const J_QUANTILE: f64 = 0.999;
pub const AMBIGUOUS: &str = "identification ambiguous: see ray_scan";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstrumentMode {
    Basis { degree: u8 },
    CellOptimal,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub instrument_mode: InstrumentMode,
    /// Random starts drawn uniformly from the box.
    pub random_starts: usize,
    /// Add the `3^K` grid over the box (with jitter) to the starts.
    pub grid: bool,
    pub start_box: [f64; 2],
    pub jitter: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Relative ridge for weight-matrix and cell `Omega` inversions.
    pub ridge: f64,
    pub ambiguity_ratio: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            instrument_mode: InstrumentMode::Basis { degree: 1 },
            random_starts: 10,
            grid: true,
            start_box: [-3.0, 3.0],
            jitter: 0.25,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            max_iter: 500,
            ridge: 1e-8,
            ambiguity_ratio: 10.0,
            seed: 0,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if let InstrumentMode::Basis { degree } = self.instrument_mode {
            if !(1..=3).contains(&degree) {
                return Err(Error::Domain(format!("instrument degree must be 1, 2 or 3, got {degree}")));
            }
        }
        if self.random_starts == 0 && !self.grid {
            return Err(Error::Domain("at least one start is required".into()));
        }
        let [lo, hi] = self.start_box;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(format!("start box [{lo}, {hi}] is empty")));
        }
        let positive = [("grad_tol", self.grad_tol), ("step_tol", self.step_tol), ("ambiguity_ratio", self.ambiguity_ratio)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ridge >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Domain("ridge and jitter must be non-negative".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Domain("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    fn tolerances(&self) -> optim::Tolerances {
        let r = self.start_box[0].abs().max(self.start_box[1].abs());
        optim::Tolerances { grad: self.grad_tol, step: self.step_tol, max_iter: self.max_iter, radius: 10.0 * r }
    }
}

/// A sample, kernel and instruments bound together for repeated evaluation.
pub struct MomentSystem<'a> {
    sample: &'a PanelSample,
    design: Design,
    z: &'a Instruments,
}

impl<'a> MomentSystem<'a> {
    /// `normalized` selects the kernel divided by `||beta||^d`; otherwise the
    /// stabilized kernel is used as is.
    pub fn new(sample: &'a PanelSample, lambda: &[f64], z: &'a Instruments, normalized: bool) -> Result<Self> {
        let design = Design::new(sample, lambda, normalized)?;
        z.check(sample, design.blocks.len())?;
        Ok(MomentSystem { sample, design, z })
    }

    pub fn width(&self) -> usize {
        self.z.width()
    }

    /// Distinct `(y, x)` rows that carry a nonzero moment.
    pub fn rows(&self) -> usize {
        self.design.rows()
    }

    /// `g_bar(beta)` and its Jacobian (`L x K`).
    pub fn moments(&self, beta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let s = self.design.stats(self.sample, beta, self.z, false)?;
        Ok((s.mean, s.jacobian))
    }

    /// Centered covariance of the per-unit moment vectors.
    pub fn covariance(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.design.stats(self.sample, beta, self.z, true)?.cov.expect("requested"))
    }

    /// `Q = g_bar' W g_bar` and its gradient `2 G' W g_bar`.
    pub fn objective(&self, beta: &[f64], weight: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        check_weight(weight, self.width())?;
        let (g, jac) = self.moments(beta)?;
        let wg = weight * &g;
        let q = g.dot(&wg);
        let grad = 2.0 * jac.transpose() * wg;
        Ok((q, grad.as_slice().to_vec()))
    }

    /// Sandwich `(G'WG)^-1 G'WSWG (G'WG)^-1 / n` at `beta`.
    pub fn variance(&self, beta: &[f64], weight: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_weight(weight, self.width())?;
        let s = self.design.stats(self.sample, beta, self.z, true)?;
        let gw = s.jacobian.transpose() * weight;
        let bread = &gw * &s.jacobian;
        let cond = condition(&bread);
        if !(cond <= 1e14) {
            return Err(Error::Singular { what: "G'WG in the sandwich variance".into(), cond });
        }
        let inv = bread.try_inverse().ok_or_else(|| Error::Singular { what: "G'WG".into(), cond })?;
        let meat = &gw * s.cov.expect("requested") * gw.transpose();
        let v = &inv * meat * &inv / self.design.n as f64;
        Ok((&v + v.transpose()) * 0.5)
    }
}

fn check_weight(weight: &DMatrix<f64>, l: usize) -> Result<()> {
    if weight.nrows() != l || weight.ncols() != l {
        return Err(Error::Shape(format!("weight is {}x{}, expected {l}x{l}", weight.nrows(), weight.ncols())));
    }
    let asym = (weight - weight.transpose()).amax();
    if asym > 1e-10 * weight.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::Domain("weight matrix is not symmetric".into()));
    }
    Ok(())
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
fn condition(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `(S + ridge * trace(S) I)^-1` and the condition number of `S`.
pub fn efficient_weight(cov: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, f64)> {
    let l = cov.nrows();
    let cond = condition(cov);
    let tr = cov.trace();
    let mut reg = cov.clone();
    for i in 0..l {
        reg[(i, i)] += ridge * tr.max(f64::MIN_POSITIVE);
    }
    let inv = match reg.clone().cholesky() {
        Some(c) => c.inverse(),
        None => reg
            .pseudo_inverse(1e-14 * tr.abs().max(f64::MIN_POSITIVE))
            .map_err(|_| Error::Singular { what: "moment covariance".into(), cond })?,
    };
    Ok(((&inv + inv.transpose()) * 0.5, cond))
}

/// `Q(beta) = g_bar' W g_bar` with the stabilized kernel.
pub fn gmm_objective(
    sample: &PanelSample,
    lambda: &[f64],
    beta: &[f64],
    instruments: &Instruments,
    weight: &DMatrix<f64>,
) -> Result<f64> {
    Ok(MomentSystem::new(sample, lambda, instruments, false)?.objective(beta, weight)?.0)
}

/// Sandwich variance of the estimator defined by `instruments` and `weight`
/// (identity when `None`), evaluated at `beta_hat`.
pub fn variance_estimate(
    sample: &PanelSample,
    lambda: &[f64],
    beta_hat: &[f64],
    instruments: &Instruments,
    weight: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let sys = MomentSystem::new(sample, lambda, instruments, true)?;
    let id;
    let w = match weight {
        Some(w) => w,
        None => {
            id = DMatrix::identity(sys.width(), sys.width());
            &id
        }
    };
    sys.variance(beta_hat, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMinimum {
    pub beta: Vec<f64>,
    /// `J / n`.
    pub objective: f64,
    pub j_stat: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub instruments: usize,
    pub starts: usize,
    pub converged_starts: usize,
    pub clusters: usize,
    pub nelder_mead_starts: usize,
    /// Condition number of the moment covariance behind the reported weight.
    pub weight_condition: f64,
    pub cells: Option<CellSummary>,
    pub rows: usize,
}

/// Output of [`two_step_estimate`]. `objective_at_solution` and `j_stat` refer
/// to the basis moments with efficient weight, whatever the step-2
/// instruments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub beta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub local_minima: Vec<LocalMinimum>,
    pub objective_at_solution: f64,
    pub j_stat: f64,
    pub j_df: usize,
    pub flags: Vec<String>,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let k = self.beta_hat.len();
        DMatrix::from_fn(k, k, |i, j| self.vcov[i][j])
    }

    pub fn ambiguous(&self) -> bool {
        self.local_minima.len() > 1
    }
}

fn starts(k: usize, config: &GmmConfig) -> Vec<Vec<f64>> {
    let mut rng = stream(config.seed, 0);
    let [lo, hi] = config.start_box;
    let mut out = Vec::new();
    if config.grid && k <= MAX_GRID_COVARIATES {
        let levels = [lo, 0.5 * (lo + hi), hi];
        for code in 0..3usize.pow(k as u32) {
            let mut c = code;
            let p: Vec<f64> = (0..k)
                .map(|_| {
                    let v = levels[c % 3];
                    c /= 3;
                    v + config.jitter * (2.0 * rng.random::<f64>() - 1.0)
                })
                .collect();
            out.push(p);
        }
    }
    for _ in 0..config.random_starts {
        out.push((0..k).map(|_| rng.random_range(lo..hi)).collect());
    }
    out
}

fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    items.into_iter().map(f).collect()
}

fn minimize(sys: &MomentSystem, weight: &DMatrix<f64>, x0: &[f64], tol: optim::Tolerances) -> optim::Minimum {
    optim::minimize(|b| sys.objective(b, weight).ok(), x0, tol)
}

fn near(a: &[f64], b: &[f64]) -> bool {
    let scale = 1.0 + a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() <= CLUSTER_TOL * scale
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

struct Refined {
    beta: Vec<f64>,
    j: f64,
    converged: bool,
    vcov: Result<DMatrix<f64>>,
    cond: f64,
    cells: Option<CellSummary>,
}

/// Multi-start two-step GMM. `oracle` supplies the true law for
/// [`InstrumentMode::Oracle`].
pub fn two_step_estimate(
    sample: &PanelSample,
    lambda: &[f64],
    config: &GmmConfig,
    oracle: Option<&DgpSpec>,
) -> Result<EstimationResult> {
    config.validate()?;
    let k = sample.covariates();
    if sample.n() < 50 * k {
        return Err(Error::InsufficientData(format!("n = {} is below 50 K = {}", sample.n(), 50 * k)));
    }
    let sub = lambda.len() + 1;
    let degree = match config.instrument_mode {
        InstrumentMode::Basis { degree } => degree,
        _ => 1,
    };
    let pilot_z = basis_instruments(sample, degree, sub)?;
    let pilot = MomentSystem::new(sample, lambda, &pilot_z, true)?;
    let l = pilot.width();
    let n = sample.n() as f64;
    let tol = config.tolerances();
    let mut flags = Vec::new();

    let oracle_z = match config.instrument_mode {
        InstrumentMode::Oracle => {
            let spec = oracle.ok_or_else(|| Error::Domain("oracle instruments need the true spec".into()))?;
            if spec.dist().lambda() != lambda {
                return Err(Error::Domain("oracle spec lambda differs from the estimation lambda".into()));
            }
            Some(oracle_instruments(sample, spec)?)
        }
        _ => None,
    };

    let identity = DMatrix::identity(l, l);
    let starts = starts(k, config);
    let n_starts = starts.len();
    let step1 = par_map(starts.clone(), |s| minimize(&pilot, &identity, &s, tol));
    let nelder_mead_starts = step1.iter().filter(|m| m.nelder_mead).count();
    let mut good: Vec<optim::Minimum> = step1.into_iter().filter(|m| m.converged && !m.diverged).collect();
    let converged_starts = good.len();
    if good.is_empty() {
        return Err(Error::NoConvergence(format!("none of {n_starts} starts converged")));
    }
    good.sort_by(|a, b| a.f.total_cmp(&b.f).then_with(|| lexicographic(&a.x, &b.x)));
    let mut clusters: Vec<Vec<f64>> = Vec::new();
    for m in &good {
        if !clusters.iter().any(|c| near(c, &m.x)) {
            clusters.push(m.x.clone());
        }
    }
    let n_clusters = clusters.len();
    clusters.truncate(MAX_CLUSTERS);

    // each cluster's weight or instruments are also tried from every start
    let refine = |b1: Vec<f64>| -> Result<Vec<Refined>> {
        let (w, cond) = efficient_weight(&pilot.covariance(&b1)?, config.ridge)?;
        let origins = std::iter::once(b1.clone()).chain(starts.iter().cloned());
        match config.instrument_mode {
            InstrumentMode::Basis { .. } => Ok(origins
                .enumerate()
                .filter_map(|(i, b0)| {
                    let m = minimize(&pilot, &w, &b0, tol);
                    let converged = m.converged && !m.diverged;
                    if i > 0 && !converged {
                        return None;
                    }
                    let vcov = pilot.variance(&m.x, &w);
                    Some(Refined { j: n * m.f, converged, beta: m.x, vcov, cond, cells: None })
                })
                .collect()),
            InstrumentMode::CellOptimal | InstrumentMode::Oracle => {
                let (z, cells) = match &oracle_z {
                    Some(z) => (z.clone(), None),
                    None => {
                        let (z, c) = cell_optimal_instruments(sample, lambda, &b1, config.ridge)?;
                        (z, Some(c))
                    }
                };
                let sys = MomentSystem::new(sample, lambda, &z, true)?;
                let id = DMatrix::identity(k, k);
                let mut out = Vec::new();
                for b0 in origins {
                    let m = minimize(&sys, &id, &b0, tol);
                    if !m.converged || m.diverged {
                        continue;
                    }
                    let Ok((w, cond)) = pilot.covariance(&m.x).and_then(|s| efficient_weight(&s, config.ridge)) else {
                        continue;
                    };
                    let Ok((q, _)) = pilot.objective(&m.x, &w) else { continue };
                    let vcov = sys.variance(&m.x, &id);
                    out.push(Refined { j: n * q, converged: true, beta: m.x, vcov, cond, cells: cells.clone() });
                }
                Ok(out)
            }
        }
    };
    let refined: Vec<Result<Vec<Refined>>> = par_map(clusters, refine);
    if refined.iter().all(|r| r.is_err()) {
        return Err(refined.into_iter().find_map(|r| r.err()).expect("at least one cluster"));
    }
    let mut refined: Vec<Refined> = refined.into_iter().flatten().flatten().filter(|r| r.j.is_finite()).collect();
    if refined.is_empty() {
        return Err(Error::NoConvergence("no step-2 minimum has a finite objective".into()));
    }
    refined.sort_by(|a, b| a.j.total_cmp(&b.j).then_with(|| lexicographic(&a.beta, &b.beta)));
    let mut distinct: Vec<Refined> = Vec::new();
    for r in refined {
        if !distinct.iter().any(|d| near(&d.beta, &r.beta)) {
            distinct.push(r);
        }
    }
    let df = l.saturating_sub(k);
    let floor = if df > 0 { ChiSquared::new(df as f64).expect("df > 0").inverse_cdf(J_QUANTILE) } else { 0.0 };
    let j_best = distinct[0].j;
    let cutoff = (config.ambiguity_ratio * j_best).max(floor);
    distinct.retain(|r| r.j <= cutoff);
    if distinct.len() > 1 {
        flags.push(AMBIGUOUS.to_string());
    }
    let best = &distinct[0];
    if !best.converged {
        flags.push("step 2 did not converge at the reported solution".into());
    }
    if best.cond > WEIGHT_COND_LIMIT {
        flags.push(format!("moment covariance is ill-conditioned ({:.2e}); ridge applied", best.cond));
    }
    if nelder_mead_starts > 0 {
        flags.push(format!("{nelder_mead_starts} starts fell back to Nelder-Mead"));
    }
    if let Some(c) = &best.cells {
        if c.degenerate > 0 {
            flags.push(format!("{} degenerate cells carry zero instruments", c.degenerate));
        }
    }
    let vcov = match &best.vcov {
        Ok(v) => v.clone(),
        Err(e) => {
            flags.push(format!("variance unavailable: {e}"));
            DMatrix::from_element(k, k, f64::NAN)
        }
    };
    Ok(EstimationResult {
        beta_hat: best.beta.clone(),
        se: (0..k).map(|i| if vcov[(i, i)] >= 0.0 { vcov[(i, i)].sqrt() } else { f64::NAN }).collect(),
        vcov: (0..k).map(|i| (0..k).map(|j| vcov[(i, j)]).collect()).collect(),
        local_minima: distinct
            .iter()
            .map(|r| LocalMinimum { beta: r.beta.clone(), objective: r.j / n, j_stat: r.j, converged: r.converged })
            .collect(),
        objective_at_solution: best.j / n,
        j_stat: best.j,
        j_df: df,
        flags,
        diagnostics: Diagnostics {
            instruments: l,
            starts: n_starts,
            converged_starts,
            clusters: n_clusters,
            nelder_mead_starts,
            weight_condition: best.cond,
            cells: best.cells.clone(),
            rows: pilot.rows(),
        },
    })
}
