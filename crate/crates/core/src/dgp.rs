//! Data-generating processes: specification, exact conditional objects by
//! outcome enumeration, panel simulation and the efficiency bound.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glogit::{sigmoid, GenLogistic};
use crate::kernel::{self, index_values, MAX_PERIODS};
use crate::quadrature::gaussian_expectation;
use crate::rng::{stream, Rng};

/// Largest panel length accepted by simulation.
pub const MAX_SIM_PERIODS: usize = 16;

/// Units simulated per random stream.
const BLOCK: usize = 256;

/// Omega values below this are reported as degenerate.
pub const OMEGA_FLOOR: f64 = 1e-14;

/// Statistic of `x` entering the mean of a Gaussian fixed effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XStatistic {
    /// Time average of covariate `k`.
    MeanCovariate(usize),
    /// Time average of `x_t'beta0`.
    MeanIndex,
}

/// Conditional law of the fixed effect given `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaLaw {
    /// Finite mixtures given as `(value, probability)` atoms: a single list
    /// shared by every `x`, or one list per point of a finite X support.
    DiscreteMixture { cells: Vec<Vec<(f64, f64)>> },
    /// `N(intercept + slope * statistic(x), sd^2)`.
    GaussianOfX { intercept: f64, slope: f64, sd: f64, statistic: XStatistic },
}

impl GammaLaw {
    pub fn dirac(value: f64) -> Self {
        GammaLaw::DiscreteMixture { cells: vec![vec![(value, 1.0)]] }
    }

    pub fn gaussian(mean: f64, sd: f64) -> Self {
        GammaLaw::GaussianOfX { intercept: mean, slope: 0.0, sd, statistic: XStatistic::MeanIndex }
    }
}

/// One point of a finite covariate support: a `T x K` matrix given by rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportPoint {
    pub x: Vec<Vec<f64>>,
    pub prob: f64,
}

/// Law of the covariate array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum XLaw {
    FiniteSupport { points: Vec<SupportPoint> },
    /// Every `x_{t,k}` i.i.d. uniform on `[lo, hi]`.
    IidUniform { lo: f64, hi: f64 },
    /// Every `x_{t,k}` i.i.d. `N(mean, sd^2)`.
    IidGaussian { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DgpSpecRaw {
    beta0: Vec<f64>,
    #[serde(rename = "T")]
    periods: usize,
    dist: GenLogistic,
    gamma: GammaLaw,
    xlaw: XLaw,
}

/// A complete data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DgpSpecRaw", into = "DgpSpecRaw")]
pub struct DgpSpec {
    beta0: Vec<f64>,
    periods: usize,
    dist: GenLogistic,
    gamma: GammaLaw,
    xlaw: XLaw,
    // flattened FiniteSupport points and cumulative probabilities
    support: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
}

impl TryFrom<DgpSpecRaw> for DgpSpec {
    type Error = Error;
    fn try_from(raw: DgpSpecRaw) -> Result<Self> {
        DgpSpec::new(raw.beta0, raw.periods, raw.dist, raw.gamma, raw.xlaw)
    }
}

impl From<DgpSpec> for DgpSpecRaw {
    fn from(s: DgpSpec) -> Self {
        DgpSpecRaw { beta0: s.beta0, periods: s.periods, dist: s.dist, gamma: s.gamma, xlaw: s.xlaw }
    }
}

fn check_atoms(atoms: &[(f64, f64)]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::Domain("empty fixed-effect mixture".into()));
    }
    if atoms.iter().any(|(v, p)| !v.is_finite() || !(*p >= 0.0)) {
        return Err(Error::Domain("mixture atoms need finite values and non-negative probabilities".into()));
    }
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("mixture probabilities sum to {total}, not 1")));
    }
    Ok(())
}

impl DgpSpec {
    pub fn new(beta0: Vec<f64>, periods: usize, dist: GenLogistic, gamma: GammaLaw, xlaw: XLaw) -> Result<Self> {
        let k = beta0.len();
        if k == 0 || beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("beta0 must be a non-empty finite vector".into()));
        }
        if !(2..=MAX_SIM_PERIODS).contains(&periods) {
            return Err(Error::Domain(format!("T = {periods} outside 2..={MAX_SIM_PERIODS}")));
        }
        let mut support = Vec::new();
        let mut cumulative = Vec::new();
        match &xlaw {
            XLaw::FiniteSupport { points } => {
                if points.is_empty() {
                    return Err(Error::Domain("finite X support is empty".into()));
                }
                let mut acc = 0.0;
                for p in points {
                    if p.x.len() != periods || p.x.iter().any(|r| r.len() != k) {
                        return Err(Error::Shape(format!("support points must be {periods} x {k} matrices")));
                    }
                    if !(p.prob >= 0.0) || p.x.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(Error::Domain("support points need finite entries and probabilities".into()));
                    }
                    support.push(p.x.concat());
                    acc += p.prob;
                    cumulative.push(acc);
                }
                if (acc - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("X support probabilities sum to {acc}, not 1")));
                }
            }
            XLaw::IidUniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Domain("uniform X law needs finite lo < hi".into()));
                }
            }
            XLaw::IidGaussian { mean, sd } => {
                if !mean.is_finite() || !(*sd > 0.0) || !sd.is_finite() {
                    return Err(Error::Domain("Gaussian X law needs a finite mean and sd > 0".into()));
                }
            }
        }
        match &gamma {
            GammaLaw::DiscreteMixture { cells } => {
                cells.iter().try_for_each(|c| check_atoms(c))?;
                let per_point = support.len();
                if !(cells.len() == 1 || (per_point > 0 && cells.len() == per_point)) {
                    return Err(Error::Shape(
                        "fixed-effect mixture needs one shared cell or one cell per X support point".into(),
                    ));
                }
            }
            GammaLaw::GaussianOfX { intercept, slope, sd, statistic } => {
                if !(*sd > 0.0) || !sd.is_finite() || !intercept.is_finite() || !slope.is_finite() {
                    return Err(Error::Domain("Gaussian fixed effect needs sd > 0 and finite coefficients".into()));
                }
                if let XStatistic::MeanCovariate(c) = statistic {
                    if *c >= k {
                        return Err(Error::Shape(format!("covariate {c} out of range for K = {k}")));
                    }
                }
            }
        }
        Ok(DgpSpec { beta0, periods, dist, gamma, xlaw, support, cumulative })
    }

    pub fn beta0(&self) -> &[f64] {
        &self.beta0
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn covariates(&self) -> usize {
        self.beta0.len()
    }

    pub fn dist(&self) -> &GenLogistic {
        &self.dist
    }

    pub fn gamma(&self) -> &GammaLaw {
        &self.gamma
    }

    pub fn xlaw(&self) -> &XLaw {
        &self.xlaw
    }

    /// Flattened support points with their probabilities, if X is discrete.
    pub fn support(&self) -> Option<Vec<(&[f64], f64)>> {
        match &self.xlaw {
            XLaw::FiniteSupport { points } => {
                Some(self.support.iter().zip(points).map(|(x, p)| (x.as_slice(), p.prob)).collect())
            }
            _ => None,
        }
    }

    pub fn with_gamma(&self, gamma: GammaLaw) -> Result<Self> {
        DgpSpec::new(self.beta0.clone(), self.periods, self.dist.clone(), gamma, self.xlaw.clone())
    }

    pub fn with_beta0(&self, beta0: Vec<f64>) -> Result<Self> {
        DgpSpec::new(beta0, self.periods, self.dist.clone(), self.gamma.clone(), self.xlaw.clone())
    }

    /// Whether the kernel applies directly, i.e. `T = tau + 1 <= 6`.
    pub fn kernel_ready(&self) -> bool {
        self.periods == self.dist.tau() + 1 && self.periods <= MAX_PERIODS
    }

    fn require_kernel(&self) -> Result<()> {
        if self.kernel_ready() {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "exact kernel objects need T = tau + 1 <= {MAX_PERIODS}; got T = {}, tau = {}",
                self.periods,
                self.dist.tau()
            )))
        }
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.periods * self.covariates() {
            return Err(Error::Shape(format!(
                "x has {} entries, expected T x K = {}",
                x.len(),
                self.periods * self.covariates()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariate value".into()));
        }
        Ok(())
    }

    fn gamma_view(&self, x: &[f64]) -> Result<GammaView<'_>> {
        match &self.gamma {
            GammaLaw::DiscreteMixture { cells } if cells.len() == 1 => Ok(GammaView::Atoms(&cells[0])),
            GammaLaw::DiscreteMixture { cells } => {
                let cell = self
                    .support
                    .iter()
                    .position(|p| p.as_slice() == x)
                    .ok_or_else(|| Error::Domain("x is not a point of the finite X support".into()))?;
                Ok(GammaView::Atoms(&cells[cell]))
            }
            GammaLaw::GaussianOfX { intercept, slope, sd, statistic } => {
                let k = self.covariates();
                let stat = match statistic {
                    XStatistic::MeanCovariate(c) => {
                        (0..self.periods).map(|t| x[t * k + c]).sum::<f64>() / self.periods as f64
                    }
                    XStatistic::MeanIndex => {
                        index_values(x, k, &self.beta0).iter().sum::<f64>() / self.periods as f64
                    }
                };
                Ok(GammaView::Gaussian { mean: intercept + slope * stat, sd: *sd })
            }
        }
    }

    /// `E[f(gamma) | X = x]` for vector-valued `f`.
    pub fn integrate_gamma<F>(&self, x: &[f64], dim: usize, mut f: F) -> Result<Vec<f64>>
    where
        F: FnMut(f64, &mut [f64]),
    {
        match self.gamma_view(x)? {
            GammaView::Atoms(atoms) => {
                let mut acc = vec![0.0; dim];
                let mut buf = vec![0.0; dim];
                for (g, p) in atoms {
                    if *p == 0.0 {
                        continue;
                    }
                    buf.iter_mut().for_each(|v| *v = 0.0);
                    f(*g, &mut buf);
                    acc.iter_mut().zip(&buf).for_each(|(a, v)| *a += p * v);
                }
                Ok(acc)
            }
            GammaView::Gaussian { mean, sd } => {
                let out = gaussian_expectation(mean, sd, dim, f);
                if out.converged {
                    Ok(out.values)
                } else {
                    Err(Error::NoConvergence(format!(
                        "Gauss-Hermite quadrature did not settle at {} nodes",
                        out.nodes
                    )))
                }
            }
        }
    }

    fn draw_x(&self, rng: &mut Rng, out: &mut [f64]) {
        match &self.xlaw {
            XLaw::FiniteSupport { .. } => {
                let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
                let i = self.cumulative.partition_point(|c| *c <= u).min(self.support.len() - 1);
                out.copy_from_slice(&self.support[i]);
            }
            XLaw::IidUniform { lo, hi } => out.iter_mut().for_each(|v| *v = rng.random_range(*lo..=*hi)),
            XLaw::IidGaussian { mean, sd } => {
                out.iter_mut().for_each(|v| *v = mean + sd * rng.sample::<f64, _>(StandardNormal))
            }
        }
    }

    fn draw_gamma(&self, x: &[f64], rng: &mut Rng) -> f64 {
        match self.gamma_view(x).expect("simulated x lies in the support") {
            GammaView::Atoms(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (g, p) in atoms {
                    acc += p;
                    if u < acc {
                        return *g;
                    }
                }
                atoms.iter().rev().find(|a| a.1 > 0.0).map(|a| a.0).unwrap_or(atoms[0].0)
            }
            GammaView::Gaussian { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

enum GammaView<'a> {
    Atoms(&'a [(f64, f64)]),
    Gaussian { mean: f64, sd: f64 },
}

/// Observed panel: `n` units, `T` periods, `K` covariates; `y` is `n x T`
/// and `x` is `n x T x K`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSample {
    n: usize,
    periods: usize,
    k: usize,
    y: Vec<u8>,
    x: Vec<f64>,
    pub seed: Option<u64>,
}

impl PanelSample {
    pub fn new(n: usize, periods: usize, k: usize, y: Vec<u8>, x: Vec<f64>) -> Result<Self> {
        if n == 0 || periods < 2 || k == 0 {
            return Err(Error::Shape("a panel needs n >= 1, T >= 2 and K >= 1".into()));
        }
        if y.len() != n * periods || x.len() != n * periods * k {
            return Err(Error::Shape(format!("inconsistent panel arrays for n = {n}, T = {periods}, K = {k}")));
        }
        kernel::check_binary(&y)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariate value in panel".into()));
        }
        Ok(PanelSample { n, periods, k, y, x, seed: None })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.periods
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

    pub fn unit_y(&self, i: usize) -> &[u8] {
        &self.y[i * self.periods..(i + 1) * self.periods]
    }

    pub fn unit_x(&self, i: usize) -> &[f64] {
        let w = self.periods * self.k;
        &self.x[i * w..(i + 1) * w]
    }

    /// `(y, x) -> (1 - y, -x)`.
    pub fn flip(&mut self) {
        self.y.iter_mut().for_each(|v| *v = 1 - *v);
        self.x.iter_mut().for_each(|v| *v = -*v);
    }

    /// Keeps the listed periods, in the given order.
    pub fn select_periods(&self, periods: &[usize]) -> Result<PanelSample> {
        if periods.len() < 2 || periods.iter().any(|t| *t >= self.periods) {
            return Err(Error::Shape("invalid period selection".into()));
        }
        let tp = periods.len();
        let mut y = Vec::with_capacity(self.n * tp);
        let mut x = Vec::with_capacity(self.n * tp * self.k);
        for i in 0..self.n {
            let (uy, ux) = (self.unit_y(i), self.unit_x(i));
            for t in periods {
                y.push(uy[*t]);
                x.extend_from_slice(&ux[t * self.k..(t + 1) * self.k]);
            }
        }
        let mut out = PanelSample::new(self.n, tp, self.k, y, x)?;
        out.seed = self.seed;
        Ok(out)
    }

    /// Long-format CSV with header `id,t,y,x1..xK`; ids and periods start at 1.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "t".to_string(), "y".to_string()];
        header.extend((1..=self.k).map(|c| format!("x{c}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(3 + self.k);
        for i in 0..self.n {
            for t in 0..self.periods {
                record.clear();
                record.push((i + 1).to_string());
                record.push((t + 1).to_string());
                record.push(self.y[i * self.periods + t].to_string());
                let base = (i * self.periods + t) * self.k;
                record.extend(self.x[base..base + self.k].iter().map(|v| format!("{v:?}")));
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format of [`PanelSample::write_csv`]. Rows of a unit may come
    /// in any order; every unit must have the same periods.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let header = rd.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names.len() < 4 || names[0] != "id" || names[1] != "t" || names[2] != "y" {
            return Err(Error::Shape("panel CSV header must be id,t,y,x1..xK".into()));
        }
        let k = names.len() - 3;
        for (c, name) in names[3..].iter().enumerate() {
            if *name != format!("x{}", c + 1) {
                return Err(Error::Shape(format!("unexpected column {name}")));
            }
        }
        let mut order: Vec<String> = Vec::new();
        let mut units: std::collections::HashMap<String, Vec<(i64, u8, Vec<f64>)>> = Default::default();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Domain(format!("row {}: invalid {what}", line + 2));
            let id = rec[0].trim().to_string();
            let t: i64 = rec[1].trim().parse().map_err(|_| bad("t"))?;
            let y: u8 = rec[2].trim().parse().map_err(|_| bad("y"))?;
            let x: Vec<f64> = (0..k)
                .map(|c| rec[3 + c].trim().parse::<f64>().map_err(|_| bad("covariate")))
                .collect::<Result<_>>()?;
            let entry = units.entry(id.clone()).or_insert_with(|| {
                order.push(id);
                Vec::new()
            });
            entry.push((t, y, x));
        }
        if order.is_empty() {
            return Err(Error::InsufficientData("panel CSV has no rows".into()));
        }
        let mut periods_ref: Option<Vec<i64>> = None;
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for id in &order {
            let mut rows = units.remove(id).unwrap();
            rows.sort_by_key(|r| r.0);
            let ts: Vec<i64> = rows.iter().map(|r| r.0).collect();
            match &periods_ref {
                None => periods_ref = Some(ts),
                Some(p) if *p != ts => {
                    return Err(Error::Shape(format!("unit {id} has periods {ts:?}, expected {p:?}")));
                }
                _ => {}
            }
            for (_, y, x) in rows {
                ys.push(y);
                xs.extend(x);
            }
        }
        let periods = periods_ref.unwrap().len();
        PanelSample::new(order.len(), periods, k, ys, xs)
    }
}

/// `P(Y = y | X = x, gamma = g)` from the product formula.
pub fn cond_prob_y(y: &[u8], x: &[f64], g: f64, spec: &DgpSpec) -> Result<f64> {
    spec.check_x(x)?;
    if y.len() != spec.periods {
        return Err(Error::Shape("outcome vector length differs from T".into()));
    }
    kernel::check_binary(y)?;
    let idx = index_values(x, spec.covariates(), &spec.beta0);
    Ok(prob_from_index(y, &idx, g, &spec.dist))
}

fn prob_from_index(y: &[u8], idx: &[f64], g: f64, dist: &GenLogistic) -> f64 {
    let mut log_p = 0.0;
    for (yt, a) in y.iter().zip(idx) {
        let lo = dist.log_odds(a + g);
        // ln F = -softplus(-lo), ln(1 - F) = -softplus(lo)
        log_p -= crate::glogit::softplus(if *yt == 1 { -lo } else { lo });
    }
    log_p.exp()
}

/// Probabilities of all `2^T` outcomes; entry `mask` has `y_t = (mask >> t) & 1`.
pub fn outcome_probs(x: &[f64], g: f64, spec: &DgpSpec) -> Result<Vec<f64>> {
    spec.check_x(x)?;
    let periods = spec.periods;
    if periods > MAX_PERIODS + 4 {
        return Err(Error::TooManyPeriods(periods));
    }
    let idx = index_values(x, spec.covariates(), &spec.beta0);
    let mut y = vec![0u8; periods];
    Ok((0..1usize << periods)
        .map(|mask| {
            y.iter_mut().enumerate().for_each(|(t, v)| *v = ((mask >> t) & 1) as u8);
            prob_from_index(&y, &idx, g, &spec.dist)
        })
        .collect())
}

/// `P(Y = e_t | X = x, gamma = g)` for every `t`.
fn single_spell_given_gamma(idx: &[f64], g: f64, dist: &GenLogistic, out: &mut [f64]) {
    let log_sf: f64 = idx.iter().map(|a| -dist.log1p_odds(a + g)).sum();
    for (o, a) in out.iter_mut().zip(idx) {
        *o = (dist.log_odds(a + g) + log_sf).exp();
    }
}

/// `E[P(Y = e_t | X = x, gamma) | X = x]` for every period `t`.
pub fn single_spell_probs(x: &[f64], spec: &DgpSpec) -> Result<Vec<f64>> {
    spec.check_x(x)?;
    let idx = index_values(x, spec.covariates(), &spec.beta0);
    spec.integrate_gamma(x, spec.periods, |g, out| single_spell_given_gamma(&idx, g, &spec.dist, out))
}

/// `E[m(Y, X; b) | X = x]` with the scale of the terms it sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CondMoment {
    /// Raw conditional mean.
    pub value: f64,
    /// Conditional mean with the common kernel factor `exp(log_scale)` removed.
    pub stab_value: f64,
    /// `sum_y P(y | x) |m(y, x; b)|` on the stabilized scale.
    pub abs_scale: f64,
    pub log_scale: f64,
}

impl CondMoment {
    /// `|E[m | x]|` relative to `sum_y P(y | x) |m|`; zero when both vanish.
    pub fn relative(&self) -> f64 {
        if self.abs_scale == 0.0 {
            0.0
        } else {
            self.stab_value.abs() / self.abs_scale
        }
    }
}

/// Conditional moment by enumeration of the single-spell outcomes (all other
/// outcomes carry `m = 0`) and integration over the fixed effect.
pub fn cond_moment(x: &[f64], spec: &DgpSpec, b: &[f64]) -> Result<CondMoment> {
    spec.require_kernel()?;
    let probs = single_spell_probs(x, spec)?;
    let k = spec.covariates();
    let lambda = spec.dist.lambda();
    let mut stab = 0.0;
    let mut abs = 0.0;
    let mut log_scale = 0.0;
    for (t, p) in probs.iter().enumerate() {
        let (m, ls) = kernel::mt_det(x, k, b, t, lambda)?;
        stab += p * m;
        abs += p * m.abs();
        log_scale = ls;
    }
    Ok(CondMoment { value: stab * log_scale.exp(), stab_value: stab, abs_scale: abs, log_scale })
}

/// `a_j(x) = w_j E[exp(lambda_j gamma) / prod_t (1 + G(x_t'beta0 + gamma)) | X = x]`.
pub fn a_weights(x: &[f64], spec: &DgpSpec) -> Result<Vec<f64>> {
    spec.require_kernel()?;
    spec.check_x(x)?;
    let idx = index_values(x, spec.covariates(), &spec.beta0);
    let dist = &spec.dist;
    let tau = dist.tau();
    let out = spec.integrate_gamma(x, tau, |g, out| {
        let log_den: f64 = idx.iter().map(|a| dist.log1p_odds(a + g)).sum();
        for (j, o) in out.iter_mut().enumerate() {
            *o = (dist.lambda()[j] * g - log_den).exp();
        }
    })?;
    Ok(out.iter().zip(dist.w()).map(|(v, w)| v * w).collect())
}

/// Simulates `n` units. Units are drawn in blocks of 256 from independent
/// streams derived from `seed`, so output does not depend on threading.
pub fn simulate_panel(spec: &DgpSpec, n: usize, seed: u64) -> Result<PanelSample> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let periods = spec.periods;
    let k = spec.covariates();
    let blocks = n.div_ceil(BLOCK);
    let run_block = |b: usize| -> (Vec<u8>, Vec<f64>) {
        let mut rng = stream(seed, b as u64);
        let units = BLOCK.min(n - b * BLOCK);
        let mut ys = vec![0u8; units * periods];
        let mut xs = vec![0.0; units * periods * k];
        for i in 0..units {
            let x = &mut xs[i * periods * k..(i + 1) * periods * k];
            spec.draw_x(&mut rng, x);
            let g = spec.draw_gamma(x, &mut rng);
            for t in 0..periods {
                let a: f64 = x[t * k..(t + 1) * k].iter().zip(&spec.beta0).map(|(u, v)| u * v).sum();
                let u: f64 = rng.random();
                ys[i * periods + t] = (u < sigmoid(spec.dist.log_odds(a + g))) as u8;
            }
        }
        (ys, xs)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<(Vec<u8>, Vec<f64>)> = {
        use rayon::prelude::*;
        (0..blocks).into_par_iter().map(run_block).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(Vec<u8>, Vec<f64>)> = (0..blocks).map(run_block).collect();
    let mut y = Vec::with_capacity(n * periods);
    let mut x = Vec::with_capacity(n * periods * k);
    for (ys, xs) in parts {
        y.extend(ys);
        x.extend(xs);
    }
    let mut sample = PanelSample::new(n, periods, k, y, x)?;
    sample.seed = Some(seed);
    Ok(sample)
}

/// Score of the complete model in `beta`:
/// `S_k = sum_t x_{t,k} score_weight(x_t'beta + g) (y_t - F(x_t'beta + g))`.
pub fn score_complete(y: &[u8], x: &[f64], g: f64, beta: &[f64], dist: &GenLogistic) -> Result<Vec<f64>> {
    let k = beta.len();
    if k == 0 || x.len() != y.len() * k {
        return Err(Error::Shape("score needs x of shape T x K".into()));
    }
    kernel::check_binary(y)?;
    let idx = index_values(x, k, beta);
    let mut s = vec![0.0; k];
    for (t, a) in idx.iter().enumerate() {
        let u = a + g;
        let r = dist.score_weight(u) * (y[t] as f64 - dist.cdf(u));
        for (kk, sk) in s.iter_mut().enumerate() {
            *sk += x[t * k + kk] * r;
        }
    }
    Ok(s)
}

/// `R(x) = E[grad m(Y, X; beta0) | X = x]` and `Omega(x) = E[m^2 | X = x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ROmega {
    pub r: Vec<f64>,
    pub omega: f64,
    /// Both quantities for the stabilized kernel `m exp(-log_scale)`.
    pub r_stab: Vec<f64>,
    pub omega_stab: f64,
    pub log_scale: f64,
    /// `Omega` is below [`OMEGA_FLOOR`] on the stabilized scale.
    pub degenerate: bool,
}

/// Per-period kernel values and stabilized gradients at `beta`.
fn kernel_terms(x: &[f64], k: usize, beta: &[f64], lambda: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)> {
    let periods = x.len() / k;
    let idx = index_values(x, k, beta);
    let mut m = Vec::with_capacity(periods);
    let mut grads = Vec::with_capacity(periods);
    let mut log_scale = 0.0;
    for t in 0..periods {
        let mut g = vec![0.0; k];
        let (v, ls) = kernel::stab_mt(&idx, x, k, t, lambda, Some(&mut g));
        m.push(v);
        grads.push(g);
        log_scale = ls;
    }
    Ok((m, grads, log_scale))
}

pub fn r_and_omega(x: &[f64], spec: &DgpSpec) -> Result<ROmega> {
    spec.require_kernel()?;
    let k = spec.covariates();
    let lambda = spec.dist.lambda();
    kernel::check_inputs(x, k, &spec.beta0, lambda)?;
    let probs = single_spell_probs(x, spec)?;
    let (m, grads, log_scale) = kernel_terms(x, k, &spec.beta0, lambda)?;
    let lambda_sum: f64 = lambda.iter().sum();
    let periods = spec.periods;
    let mut r_stab = vec![0.0; k];
    let mut r_raw = vec![0.0; k];
    let mut omega_stab = 0.0;
    for t in 0..periods {
        omega_stab += probs[t] * m[t] * m[t];
        for kk in 0..k {
            let xbar = (0..periods).map(|s| x[s * k + kk]).sum::<f64>() / periods as f64;
            r_stab[kk] += probs[t] * grads[t][kk];
            r_raw[kk] += probs[t] * (grads[t][kk] + m[t] * xbar * lambda_sum);
        }
    }
    let scale = log_scale.exp();
    Ok(ROmega {
        r: r_raw.iter().map(|v| v * scale).collect(),
        omega: omega_stab * scale * scale,
        r_stab,
        omega_stab,
        log_scale,
        degenerate: omega_stab < OMEGA_FLOOR,
    })
}

/// `E[S(Y, X, gamma; beta0) m(Y, X; beta0) | X = x]` on the raw scale. It equals
/// `-R(x)`.
pub fn score_moment_product(x: &[f64], spec: &DgpSpec) -> Result<Vec<f64>> {
    spec.require_kernel()?;
    let k = spec.covariates();
    let periods = spec.periods;
    let lambda = spec.dist.lambda();
    kernel::check_inputs(x, k, &spec.beta0, lambda)?;
    let idx = index_values(x, k, &spec.beta0);
    let (m, _, log_scale) = kernel_terms(x, k, &spec.beta0, lambda)?;
    let dist = &spec.dist;
    let mut p = vec![0.0; periods];
    let mut e = vec![0u8; periods];
    let out = spec.integrate_gamma(x, k, |g, out| {
        single_spell_given_gamma(&idx, g, dist, &mut p);
        for t in 0..periods {
            e.iter_mut().enumerate().for_each(|(s, v)| *v = (s == t) as u8);
            let s = score_complete(&e, x, g, &spec.beta0, dist).expect("shapes checked");
            for kk in 0..k {
                out[kk] += p[t] * m[t] * s[kk];
            }
        }
    })?;
    let scale = log_scale.exp();
    Ok(out.iter().map(|v| v * scale).collect())
}

/// The efficiency bound and its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyBound {
    /// `V0 = E[R R' / Omega]^{-1}`.
    pub v0: DMatrix<f64>,
    pub information: DMatrix<f64>,
    pub condition: f64,
    /// Support points whose Omega is degenerate; they carry no information.
    pub degenerate_points: Vec<usize>,
    /// Whether the expectation over X is a Monte Carlo average.
    pub monte_carlo: bool,
}

fn invert_information(info: DMatrix<f64>, degenerate_points: Vec<usize>, monte_carlo: bool) -> Result<EfficiencyBound> {
    let sv = info.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= 1e12) {
        return Err(Error::Singular { what: "E[R R' / Omega]".into(), cond: condition });
    }
    let v = info.clone().try_inverse().ok_or(Error::Singular { what: "E[R R' / Omega]".into(), cond: condition })?;
    let v0 = (&v + v.transpose()) * 0.5;
    Ok(EfficiencyBound { v0, information: info, condition, degenerate_points, monte_carlo })
}

fn information_term(ro: &ROmega, k: usize) -> DMatrix<f64> {
    let r = DVector::from_column_slice(&ro.r_stab);
    if ro.degenerate {
        DMatrix::zeros(k, k)
    } else {
        &r * r.transpose() / ro.omega_stab
    }
}

/// Exact `V0` for a finite X support.
pub fn efficiency_bound(spec: &DgpSpec) -> Result<EfficiencyBound> {
    spec.require_kernel()?;
    let support = spec.support().ok_or_else(|| {
        Error::Unsupported("the exact efficiency bound needs a finite_support X law".into())
    })?;
    let k = spec.covariates();
    let mut info = DMatrix::zeros(k, k);
    let mut degenerate = Vec::new();
    for (i, (x, p)) in support.iter().enumerate() {
        if *p == 0.0 {
            continue;
        }
        let ro = r_and_omega(x, spec)?;
        if ro.degenerate {
            degenerate.push(i);
        }
        info += information_term(&ro, k) * *p;
    }
    invert_information(info, degenerate, false)
}

/// `V0` with the expectation over X replaced by an average over `draws`
/// simulated covariate arrays.
pub fn efficiency_bound_mc(spec: &DgpSpec, draws: usize, seed: u64) -> Result<EfficiencyBound> {
    spec.require_kernel()?;
    if draws == 0 {
        return Err(Error::Domain("draws must be positive".into()));
    }
    let k = spec.covariates();
    let mut rng = stream(seed, u64::MAX);
    let mut x = vec![0.0; spec.periods * k];
    let mut info = DMatrix::zeros(k, k);
    for _ in 0..draws {
        spec.draw_x(&mut rng, &mut x);
        let ro = r_and_omega(&x, spec)?;
        info += information_term(&ro, k) / draws as f64;
    }
    invert_information(info, Vec::new(), true)
}
