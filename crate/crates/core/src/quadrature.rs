//! Gaussian expectations by Gauss–Hermite quadrature with node doubling.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::hermite::GaussHermite;

pub const MIN_NODES: usize = 64;
pub const MAX_NODES: usize = 512;
pub const AGREEMENT: f64 = 1e-10;

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`.
fn standard_rule(nodes: usize) -> Arc<Vec<(f64, f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().unwrap().get(&nodes) {
        return rule.clone();
    }
    let gh = GaussHermite::new(NonZeroUsize::new(nodes).expect("positive node count"));
    let norm = std::f64::consts::PI.sqrt();
    let rule: Vec<(f64, f64)> = gh
        .as_node_weight_pairs()
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / norm))
        .collect();
    let rule = Arc::new(rule);
    cache.lock().unwrap().insert(nodes, rule.clone());
    rule
}

/// Result of a quadrature run.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianIntegral {
    pub values: Vec<f64>,
    pub nodes: usize,
    pub converged: bool,
}

/// `E[f(mean + sd Z)]` for a vector-valued `f` of dimension `dim`. The rule
/// starts at [`MIN_NODES`] and doubles until successive results agree
/// componentwise to [`AGREEMENT`] (relative), or [`MAX_NODES`] is reached.
pub fn gaussian_expectation<F>(mean: f64, sd: f64, dim: usize, mut f: F) -> GaussianIntegral
where
    F: FnMut(f64, &mut [f64]),
{
    let mut buf = vec![0.0; dim];
    let mut run = |nodes: usize| {
        let mut acc = vec![0.0; dim];
        for (z, w) in standard_rule(nodes).iter() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(mean + sd * z, &mut buf);
            for (a, v) in acc.iter_mut().zip(&buf) {
                *a += w * v;
            }
        }
        acc
    };
    let mut nodes = MIN_NODES;
    let mut prev = run(nodes);
    while nodes < MAX_NODES {
        nodes *= 2;
        let next = run(nodes);
        let agree = prev
            .iter()
            .zip(&next)
            .all(|(a, b)| (a - b).abs() <= AGREEMENT * a.abs().max(b.abs()) || a == b);
        prev = next;
        if agree {
            return GaussianIntegral { values: prev, nodes, converged: true };
        }
    }
    GaussianIntegral { values: prev, nodes, converged: false }
}
