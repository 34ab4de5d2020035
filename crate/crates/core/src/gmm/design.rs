//! Compressed sample and stacked moment evaluation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dgp::PanelSample;
use crate::error::{Error, Result};
use crate::kernel::{self, index_values, single_spell, MAX_PERIODS};

use super::Instruments;

const CHUNK: usize = 2048;

/// Units with identical `(y, x)` merged into weighted rows. Units whose
/// outcomes contain no single spell in any period subset carry a zero moment
/// and only count towards `n`.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub n: usize,
    pub k: usize,
    pub blocks: Vec<Vec<usize>>,
    pub weight: Vec<f64>,
    /// Representative unit of each row.
    pub unit: Vec<usize>,
    /// Single-spell period per row and block, `-1` if none.
    pub spell: Vec<i8>,
    pub lambda: Vec<f64>,
    pub normalized: bool,
}

/// Moments, Jacobian and outer-product covariance at one `beta`.
#[derive(Debug, Clone)]
pub(crate) struct MomentStats {
    pub mean: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Centered covariance of the per-unit moment vectors.
    pub cov: Option<DMatrix<f64>>,
}

/// All size-`size` subsets of `0..periods` in lexicographic order.
pub(crate) fn period_subsets(periods: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(size);
    fn rec(start: usize, periods: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for s in start..periods {
            cur.push(s);
            rec(s + 1, periods, size, cur, out);
            cur.pop();
        }
    }
    rec(0, periods, size, &mut cur, &mut out);
    out
}

/// Exponent `d` of the normalization `||beta||^d`; the stabilized kernel
/// vanishes at that order as `beta -> 0`.
pub(crate) fn vanishing_order(sub_periods: usize) -> i32 {
    ((sub_periods - 1) * (sub_periods - 2) / 2) as i32
}

fn bits(v: &[f64]) -> impl Iterator<Item = u64> + '_ {
    v.iter().map(|x| if *x == 0.0 { 0 } else { x.to_bits() })
}

impl Design {
    pub fn new(sample: &PanelSample, lambda: &[f64], normalized: bool) -> Result<Self> {
        let sub = lambda.len() + 1;
        let periods = sample.periods();
        let k = sample.covariates();
        if sub > MAX_PERIODS {
            return Err(Error::TooManyPeriods(sub));
        }
        if periods < sub {
            return Err(Error::Shape(format!(
                "the kernel needs T = {sub} periods for {} exponents, sample has {periods}",
                lambda.len()
            )));
        }
        kernel::check_inputs(&vec![0.0; sub * k], k, &vec![0.0; k], lambda)?;
        let blocks = period_subsets(periods, sub);
        let mut rows: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut weight = Vec::new();
        let mut unit = Vec::new();
        let mut spell = Vec::new();
        let mut sub_y = vec![0u8; sub];
        for i in 0..sample.n() {
            let y = sample.unit_y(i);
            let spells: Vec<i8> = blocks
                .iter()
                .map(|b| {
                    for (c, s) in b.iter().enumerate() {
                        sub_y[c] = y[*s];
                    }
                    single_spell(&sub_y).map_or(-1, |t| t as i8)
                })
                .collect();
            if spells.iter().all(|s| *s < 0) {
                continue;
            }
            let x = sample.unit_x(i);
            if let Some(j) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("observation {i}: covariate {j} is not finite")));
            }
            let key: Vec<u64> = y.iter().map(|v| *v as u64).chain(bits(x)).collect();
            match rows.get(&key) {
                Some(r) => weight[*r] += 1.0,
                None => {
                    rows.insert(key, weight.len());
                    weight.push(1.0);
                    unit.push(i);
                    spell.extend(spells);
                }
            }
        }
        Ok(Design { n: sample.n(), k, blocks, weight, unit, spell, lambda: lambda.to_vec(), normalized })
    }

    pub fn rows(&self) -> usize {
        self.weight.len()
    }

    pub fn sub_periods(&self) -> usize {
        self.lambda.len() + 1
    }

    /// Kernel value and gradient for row `r`, block `b`, on the subset `x`.
    /// `x_sub` and `grad` are scratch space.
    fn kernel(&self, sample: &PanelSample, r: usize, b: usize, beta: &[f64], x_sub: &mut Vec<f64>, grad: &mut [f64]) -> Option<f64> {
        let t = self.spell[r * self.blocks.len() + b];
        if t < 0 {
            return None;
        }
        let x = sample.unit_x(self.unit[r]);
        let k = self.k;
        x_sub.clear();
        for s in &self.blocks[b] {
            x_sub.extend_from_slice(&x[s * k..(s + 1) * k]);
        }
        let idx = index_values(x_sub, k, beta);
        let (v, _) = kernel::stab_mt(&idx, x_sub, k, t as usize, &self.lambda, Some(grad));
        if self.normalized {
            let d = vanishing_order(self.sub_periods());
            let nb2: f64 = beta.iter().map(|v| v * v).sum();
            let scale = nb2.powf(-0.5 * d as f64);
            for (g, bk) in grad.iter_mut().zip(beta) {
                *g = scale * (*g - d as f64 * v * bk / nb2);
            }
            Some(v * scale)
        } else {
            Some(v)
        }
    }

    /// Per-row kernel values and gradients, `rows x blocks` and
    /// `rows x blocks x K`, with zeros where a block has no single spell.
    pub fn kernels(&self, sample: &PanelSample, beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_beta(beta)?;
        let nb = self.blocks.len();
        let k = self.k;
        let mut vals = vec![0.0; self.rows() * nb];
        let mut grads = vec![0.0; self.rows() * nb * k];
        let fill = |(c, (v, g)): (usize, (&mut [f64], &mut [f64]))| -> Result<()> {
            let mut x_sub = Vec::with_capacity(self.sub_periods() * k);
            let first = c * CHUNK;
            for i in 0..v.len() / nb {
                let r = first + i;
                for b in 0..nb {
                    let gb = &mut g[(i * nb + b) * k..(i * nb + b + 1) * k];
                    if let Some(m) = self.kernel(sample, r, b, beta, &mut x_sub, gb) {
                        if !m.is_finite() || gb.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!(
                                "observation {}: moment is not finite at beta = {beta:?}",
                                self.unit[r]
                            )));
                        }
                        v[i * nb + b] = m;
                    }
                }
            }
            Ok(())
        };
        let chunks = vals.chunks_mut(CHUNK * nb).zip(grads.chunks_mut(CHUNK * nb * k)).enumerate();
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let jobs: Vec<_> = chunks.collect();
            jobs.into_par_iter().map(fill).collect::<Result<Vec<()>>>()?;
        }
        #[cfg(not(feature = "parallel"))]
        chunks.map(fill).collect::<Result<Vec<()>>>()?;
        Ok((vals, grads))
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.k {
            return Err(Error::Shape(format!("beta has {} entries, K = {}", beta.len(), self.k)));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("beta = {beta:?}")));
        }
        if self.normalized && beta.iter().all(|v| *v == 0.0) {
            return Err(Error::Domain("the normalized kernel is undefined at beta = 0".into()));
        }
        Ok(())
    }

    /// Stacked moment statistics. `with_cov` adds the covariance.
    pub fn stats(&self, sample: &PanelSample, beta: &[f64], z: &Instruments, with_cov: bool) -> Result<MomentStats> {
        let (vals, grads) = self.kernels(sample, beta)?;
        let nb = self.blocks.len();
        let k = self.k;
        let widths: Vec<usize> = z.blocks.iter().map(|m| m.ncols()).collect();
        let l: usize = widths.iter().sum();
        let partial = |range: std::ops::Range<usize>| {
            let mut mean = DVector::<f64>::zeros(l);
            let mut jac = DMatrix::<f64>::zeros(l, k);
            let mut outer = if with_cov { Some(DMatrix::<f64>::zeros(l, l)) } else { None };
            let mut u = DVector::<f64>::zeros(l);
            for r in range {
                let w = self.weight[r];
                let unit = self.unit[r];
                let mut off = 0;
                u.fill(0.0);
                for b in 0..nb {
                    let m = vals[r * nb + b];
                    let g = &grads[(r * nb + b) * k..(r * nb + b + 1) * k];
                    if m != 0.0 || g.iter().any(|v| *v != 0.0) {
                        for c in 0..widths[b] {
                            let zc = z.blocks[b][(unit, c)];
                            u[off + c] = zc * m;
                            for kk in 0..k {
                                jac[(off + c, kk)] += w * zc * g[kk];
                            }
                        }
                    }
                    off += widths[b];
                }
                mean.axpy(w, &u, 1.0);
                if let Some(o) = outer.as_mut() {
                    o.ger(w, &u, &u, 1.0);
                }
            }
            (mean, jac, outer)
        };
        let ranges: Vec<_> = (0..self.rows()).step_by(CHUNK).map(|s| s..(s + CHUNK).min(self.rows())).collect();
        #[cfg(feature = "parallel")]
        let parts: Vec<_> = {
            use rayon::prelude::*;
            ranges.into_par_iter().map(partial).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<_> = ranges.into_iter().map(partial).collect();
        let n = self.n as f64;
        let mut mean = DVector::zeros(l);
        let mut jacobian = DMatrix::zeros(l, k);
        let mut outer = if with_cov { Some(DMatrix::zeros(l, l)) } else { None };
        for (m, j, o) in parts {
            mean += m;
            jacobian += j;
            if let (Some(acc), Some(o)) = (outer.as_mut(), o) {
                *acc += o;
            }
        }
        mean /= n;
        jacobian /= n;
        let cov = outer.map(|o| o / n - &mean * mean.transpose());
        Ok(MomentStats { mean, jacobian, cov })
    }
}
