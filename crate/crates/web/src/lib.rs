//! WebAssembly bindings for the browser demo. Every export takes and returns
//! JSON strings; errors come back as JS exceptions.

use genlogit::dgp::{cond_moment, efficiency_bound, DgpSpec};
use genlogit::ident::{default_probes, ray_scan, ray_scan_curve};
use genlogit::GenLogistic;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

#[derive(Serialize)]
struct Curve {
    u: Vec<f64>,
    cdf: Vec<f64>,
    pdf: Vec<f64>,
    logistic_cdf: Vec<f64>,
}

/// CDF and density of a shock distribution on `[lo, hi]`, with the logistic
/// CDF for comparison.
#[wasm_bindgen]
pub fn distribution_curve(dist_json: &str, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
    let dist: GenLogistic = serde_json::from_str(dist_json).map_err(js_err)?;
    let logit = GenLogistic::logit();
    let u = grid(lo, hi, points);
    let curve = Curve {
        cdf: u.iter().map(|v| dist.cdf(*v)).collect(),
        pdf: u.iter().map(|v| dist.pdf(*v)).collect(),
        logistic_cdf: u.iter().map(|v| logit.cdf(*v)).collect(),
        u,
    };
    to_json(&curve)
}

#[derive(Serialize)]
struct RayView {
    roots: Vec<f64>,
    ray_interval: (f64, f64),
    flags: Vec<String>,
    probes: usize,
    c: Vec<f64>,
    objective: Vec<f64>,
}

/// Roots of the conditional moment along `c * beta0` and the objective curve
/// used to plot them.
#[wasm_bindgen]
pub fn ray_view(spec_json: &str, lo: f64, hi: f64, probes: usize, seed: u64) -> Result<String, JsError> {
    let spec: DgpSpec = serde_json::from_str(spec_json).map_err(js_err)?;
    let probes = default_probes(&spec, probes, seed);
    let report = ray_scan(&spec, &probes, (lo, hi)).map_err(js_err)?;
    let curve = ray_scan_curve(&spec, &probes, &grid(lo, hi, 300)).map_err(js_err)?;
    let (c, objective) = curve.into_iter().unzip();
    to_json(&RayView {
        roots: report.roots,
        ray_interval: report.ray_interval,
        flags: report.flags,
        probes: probes.len(),
        c,
        objective,
    })
}

#[derive(Serialize)]
struct PointMoment {
    x: Vec<f64>,
    prob: f64,
    relative: f64,
}

#[derive(Serialize)]
struct BoundView {
    v0: Vec<Vec<f64>>,
    condition: f64,
    points: Vec<PointMoment>,
}

/// Efficiency bound of a finite-support spec and the relative conditional
/// moment at `beta` for every support point.
#[wasm_bindgen]
pub fn bound_view(spec_json: &str, beta_json: &str) -> Result<String, JsError> {
    let spec: DgpSpec = serde_json::from_str(spec_json).map_err(js_err)?;
    let beta: Vec<f64> = serde_json::from_str(beta_json).map_err(js_err)?;
    let b = efficiency_bound(&spec).map_err(js_err)?;
    let support = spec.support().ok_or_else(|| js_err("spec needs a finite_support X law"))?;
    let points = support
        .into_iter()
        .map(|(x, prob)| {
            let m = cond_moment(x, &spec, &beta).map_err(js_err)?;
            Ok(PointMoment { x: x.to_vec(), prob, relative: m.relative() })
        })
        .collect::<Result<_, JsError>>()?;
    let v0 = (0..b.v0.nrows()).map(|i| b.v0.row(i).iter().copied().collect()).collect();
    to_json(&BoundView { v0, condition: b.condition, points })
}
