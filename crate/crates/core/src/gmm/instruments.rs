//! Instrument construction.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dgp::{r_and_omega, DgpSpec, PanelSample};
use crate::error::{Error, Result};

use super::design::{period_subsets, vanishing_order, Design};

/// Most distinct covariate trajectories treated as discrete support.
pub const MAX_CELLS: usize = 200;
/// Cells with fewer units are pooled into their nearest neighbour.
pub const MIN_CELL_SIZE: usize = 10;

/// Per-unit instrument values, one `n x L_b` matrix per period subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Instruments {
    pub(crate) blocks: Vec<DMatrix<f64>>,
}

impl Instruments {
    /// A single block for samples with `T = tau + 1`.
    pub fn new(values: DMatrix<f64>) -> Self {
        Instruments { blocks: vec![values] }
    }

    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.nrows() != blocks[0].nrows()) {
            return Err(Error::Shape("instrument blocks must be non-empty with equal row counts".into()));
        }
        Ok(Instruments { blocks })
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Total number of moment conditions.
    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }

    pub fn units(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub(crate) fn check(&self, sample: &PanelSample, blocks: usize) -> Result<()> {
        if self.units() != sample.n() {
            return Err(Error::Shape(format!("{} instrument rows for n = {}", self.units(), sample.n())));
        }
        if self.blocks.len() != blocks {
            return Err(Error::Shape(format!("{} instrument blocks for {blocks} period subsets", self.blocks.len())));
        }
        Ok(())
    }
}

fn basis_row(x: &[f64], k: usize, degree: u8, out: &mut Vec<f64>) {
    let periods = x.len() / k;
    out.clear();
    out.push(1.0);
    out.extend_from_slice(x);
    if degree >= 2 {
        let xbar: Vec<f64> = (0..k).map(|kk| (0..periods).map(|t| x[t * k + kk]).sum::<f64>() / periods as f64).collect();
        for a in 0..k {
            out.push(xbar[a] * xbar[a]);
        }
        for a in 0..k {
            for b in a + 1..k {
                out.push(xbar[a] * xbar[b]);
            }
        }
        if degree >= 3 {
            for a in 0..k {
                out.push(xbar[a].powi(3));
            }
        }
    }
}

/// Number of basis instruments per period subset.
pub fn basis_width(sub_periods: usize, k: usize, degree: u8) -> usize {
    let mut l = 1 + sub_periods * k;
    if degree >= 2 {
        l += k + k * (k - 1) / 2;
    }
    if degree >= 3 {
        l += k;
    }
    l
}

/// Constant, every `x_{t,k}`, then (degree 2 and 3) powers and pairwise
/// products of the time-averaged covariates, per `sub_periods`-subset of
/// periods. Columns are scaled to unit sample second moment.
pub fn basis_instruments(sample: &PanelSample, degree: u8, sub_periods: usize) -> Result<Instruments> {
    if !(1..=3).contains(&degree) {
        return Err(Error::Domain(format!("instrument degree must be 1, 2 or 3, got {degree}")));
    }
    if sub_periods < 2 || sub_periods > sample.periods() {
        return Err(Error::Shape(format!("cannot take {sub_periods}-period subsets of T = {}", sample.periods())));
    }
    let k = sample.covariates();
    let n = sample.n();
    let subsets = period_subsets(sample.periods(), sub_periods);
    let l = basis_width(sub_periods, k, degree);
    if l * subsets.len() * 10 > n {
        return Err(Error::InsufficientData(format!(
            "{} instruments for n = {n} (at most n/10 allowed)",
            l * subsets.len()
        )));
    }
    let mut blocks = Vec::with_capacity(subsets.len());
    let mut row = Vec::with_capacity(l);
    let mut x_sub = Vec::with_capacity(sub_periods * k);
    for subset in &subsets {
        let mut z = DMatrix::<f64>::zeros(n, l);
        for i in 0..n {
            let x = sample.unit_x(i);
            x_sub.clear();
            for s in subset {
                x_sub.extend_from_slice(&x[s * k..(s + 1) * k]);
            }
            basis_row(&x_sub, k, degree, &mut row);
            for (c, v) in row.iter().enumerate() {
                z[(i, c)] = *v;
            }
        }
        for mut col in z.column_iter_mut() {
            let m2 = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
            if m2 > 0.0 {
                col /= m2.sqrt();
            }
        }
        blocks.push(z);
    }
    Ok(Instruments { blocks })
}

/// Cell structure behind [`cell_optimal_instruments`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cells: usize,
    /// Cells merged into a neighbour for having fewer than [`MIN_CELL_SIZE`] units.
    pub pooled: usize,
    /// Cells whose estimated `Omega` is zero; their instrument is zero.
    pub degenerate: usize,
}

fn x_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

/// Cell id per unit after pooling, the cell count, and pooled cells.
fn cells(sample: &PanelSample) -> Result<(Vec<usize>, usize, usize)> {
    let mut ids: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut reps: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut cell = Vec::with_capacity(sample.n());
    for i in 0..sample.n() {
        let key = x_key(sample.unit_x(i));
        let id = *ids.entry(key).or_insert_with(|| {
            reps.push(i);
            counts.push(0);
            reps.len() - 1
        });
        if reps.len() > MAX_CELLS {
            return Err(Error::Unsupported(format!(
                "covariates take more than {MAX_CELLS} distinct trajectories; use Basis instruments for continuous X"
            )));
        }
        counts[id] += 1;
        cell.push(id);
    }
    let large: Vec<usize> = (0..reps.len()).filter(|c| counts[*c] >= MIN_CELL_SIZE).collect();
    if large.is_empty() {
        return Err(Error::InsufficientData(format!("no covariate cell has {MIN_CELL_SIZE} units")));
    }
    let mut target: Vec<usize> = (0..reps.len()).collect();
    let mut pooled = 0;
    for c in 0..reps.len() {
        if counts[c] >= MIN_CELL_SIZE {
            continue;
        }
        pooled += 1;
        let xc = sample.unit_x(reps[c]);
        let dist = |d: usize| -> f64 { sample.unit_x(reps[d]).iter().zip(xc).map(|(a, b)| (a - b) * (a - b)).sum() };
        target[c] = *large.iter().min_by(|a, b| dist(**a).total_cmp(&dist(**b))).expect("non-empty");
    }
    let mut relabel = BTreeMap::new();
    for c in &large {
        let next = relabel.len();
        relabel.insert(*c, next);
    }
    Ok((cell.iter().map(|c| relabel[&target[*c]]).collect(), large.len(), pooled))
}

/// Estimated optimal instruments `R(x) / Omega(x)` per covariate cell, at
/// `beta_pilot`, for the kernel the estimator uses. One `K`-column block per
/// period subset.
pub fn cell_optimal_instruments(
    sample: &PanelSample,
    lambda: &[f64],
    beta_pilot: &[f64],
    ridge: f64,
) -> Result<(Instruments, CellSummary)> {
    if ridge < 0.0 {
        return Err(Error::Domain(format!("ridge must be non-negative, got {ridge}")));
    }
    let (cell, ncells, pooled) = cells(sample)?;
    let design = Design::new(sample, lambda, true)?;
    let (vals, grads) = design.kernels(sample, beta_pilot)?;
    let k = design.k;
    let nb = design.blocks.len();
    let mut count = vec![0.0; ncells];
    for c in &cell {
        count[*c] += 1.0;
    }
    let mut r = vec![0.0; ncells * nb * k];
    let mut omega = vec![0.0; ncells * nb];
    for row in 0..design.rows() {
        let c = cell[design.unit[row]];
        let w = design.weight[row];
        for b in 0..nb {
            let m = vals[row * nb + b];
            omega[c * nb + b] += w * m * m;
            for kk in 0..k {
                r[(c * nb + b) * k + kk] += w * grads[(row * nb + b) * k + kk];
            }
        }
    }
    let mut degenerate = 0;
    let mut blocks = Vec::with_capacity(nb);
    let mut g = vec![0.0; ncells * nb * k];
    for b in 0..nb {
        let max_omega = (0..ncells).map(|c| omega[c * nb + b] / count[c]).fold(0.0, f64::max);
        let floor = ridge * max_omega;
        for c in 0..ncells {
            let om = omega[c * nb + b] / count[c];
            if om <= 0.0 {
                degenerate += 1;
                continue;
            }
            for kk in 0..k {
                g[(c * nb + b) * k + kk] = r[(c * nb + b) * k + kk] / count[c] / om.max(floor);
            }
        }
        blocks.push(DMatrix::from_fn(sample.n(), k, |i, kk| g[(cell[i] * nb + b) * k + kk]));
    }
    Ok((Instruments { blocks }, CellSummary { cells: ncells, pooled, degenerate }))
}

/// Optimal instruments from the true conditional law in `spec`, for the kernel
/// the estimator uses. Zero where `Omega` vanishes.
pub fn oracle_instruments(sample: &PanelSample, spec: &DgpSpec) -> Result<Instruments> {
    if !spec.kernel_ready() {
        return Err(Error::Unsupported("oracle instruments need a spec with T = tau + 1".into()));
    }
    if sample.periods() != spec.periods() || sample.covariates() != spec.covariates() {
        return Err(Error::Shape(format!(
            "sample is T = {}, K = {}; spec is T = {}, K = {}",
            sample.periods(),
            sample.covariates(),
            spec.periods(),
            spec.covariates()
        )));
    }
    let k = spec.covariates();
    let d = vanishing_order(spec.periods());
    let norm = spec.beta0().iter().map(|v| v * v).sum::<f64>().sqrt().powi(d);
    let mut cache: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    let mut z = DMatrix::<f64>::zeros(sample.n(), k);
    for i in 0..sample.n() {
        let x = sample.unit_x(i);
        let key = x_key(x);
        if !cache.contains_key(&key) {
            let ro = r_and_omega(x, spec)?;
            let g = if ro.degenerate { vec![0.0; k] } else { ro.r_stab.iter().map(|r| r * norm / ro.omega_stab).collect() };
            cache.insert(key.clone(), g);
        }
        for (kk, v) in cache[&key].iter().enumerate() {
            z[(i, kk)] = *v;
        }
    }
    Ok(Instruments::new(z))
}
