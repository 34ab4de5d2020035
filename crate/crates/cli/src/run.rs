use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genlogit::dgp::{
    cond_moment, efficiency_bound, simulate_panel, DgpSpec, PanelSample,
};
use genlogit::gmm::{two_step_estimate, EstimationResult, InstrumentMode};
use genlogit::ident::{
    check_support_assumptions, default_probes, degenerate_check_sample, degenerate_check_spec, ray_scan,
    ray_scan_curve, rejection_scan, test_beta_zero, ZeroTest, ROOT_MATCH_TOL,
};
use genlogit::kernel::{grad_m, moment_m};
use genlogit::rng::derive_seed;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, Subcommand};

const SCAN_POINTS: usize = 400;
const ZERO_TEST_LEVEL: f64 = 0.05;

/// What a finished run reports back to `main`.
pub struct Outcome {
    pub ambiguous: bool,
    pub files: Vec<PathBuf>,
}

pub struct RunContext {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn run(sub: Subcommand, ctx: &RunContext) -> Result<Outcome> {
    ctx.config.validate(sub)?;
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match sub {
        Subcommand::Simulate => simulate(ctx),
        Subcommand::Estimate => estimate(ctx),
        Subcommand::Identify => identify(ctx),
        Subcommand::Bound => bound(ctx),
        Subcommand::TestZero => test_zero(ctx),
        Subcommand::Moment => moment(ctx),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_sample(path: &Path, sample: &PanelSample) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    sample.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_sample(path: &Path) -> Result<PanelSample> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    PanelSample::read_csv(BufReader::new(f)).with_context(|| format!("reading panel {}", path.display()))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rep_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, r as u64)
}

fn sample_name(r: usize, reps: usize) -> String {
    if reps == 1 {
        "sample.csv".into()
    } else {
        format!("sample_{r:04}.csv")
    }
}

/// The data behind replication `r`: the input file, or a fresh simulation.
fn data(ctx: &RunContext, r: usize) -> Result<PanelSample> {
    match &ctx.config.input {
        Some(p) => read_sample(p),
        None => Ok(simulate_panel(ctx.config.spec()?, ctx.config.n()?, rep_seed(ctx.seed, r))?),
    }
}

fn simulate(ctx: &RunContext) -> Result<Outcome> {
    let cfg = &ctx.config;
    let spec = cfg.spec()?;
    let n = cfg.n()?;
    let reps = cfg.replications;
    let files: Vec<PathBuf> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sample = simulate_panel(spec, n, rep_seed(ctx.seed, r))?;
            let path = ctx.out.join(sample_name(r, reps));
            write_sample(&path, &sample)?;
            Ok(path)
        })
        .collect::<Result<_>>()?;
    Ok(Outcome { ambiguous: false, files })
}

#[derive(Serialize)]
struct Replication {
    index: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<EstimationResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct Summary {
    replications: usize,
    failed: usize,
    ambiguous: usize,
    mean_beta: Vec<f64>,
    sd_beta: Vec<f64>,
    mean_se: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

fn summarize(reps: &[Replication], beta0: Option<&[f64]>) -> Summary {
    let ok: Vec<&EstimationResult> = reps.iter().filter_map(|r| r.result.as_ref()).collect();
    let k = ok.first().map_or(0, |r| r.beta_hat.len());
    let m = ok.len() as f64;
    let mean = |f: &dyn Fn(&EstimationResult) -> &[f64]| -> Vec<f64> {
        (0..k).map(|j| ok.iter().map(|r| f(r)[j]).sum::<f64>() / m).collect()
    };
    let mean_beta = mean(&|r| &r.beta_hat);
    let mean_se = mean(&|r| &r.se);
    let sd_beta = (0..k)
        .map(|j| {
            if ok.len() < 2 {
                return f64::NAN;
            }
            let ss: f64 = ok.iter().map(|r| (r.beta_hat[j] - mean_beta[j]).powi(2)).sum();
            (ss / (m - 1.0)).sqrt()
        })
        .collect();
    let bias = beta0.filter(|b| b.len() == k).map(|b| mean_beta.iter().zip(b).map(|(m, b)| m - b).collect());
    Summary {
        replications: reps.len(),
        failed: reps.len() - ok.len(),
        ambiguous: ok.iter().filter(|r| r.ambiguous()).count(),
        mean_beta,
        sd_beta,
        mean_se,
        bias,
    }
}

fn estimate(ctx: &RunContext) -> Result<Outcome> {
    let cfg = &ctx.config;
    let gmm = cfg.gmm.clone().context("missing key: gmm")?;
    let lambda = cfg.lambda()?;
    let oracle = match gmm.instrument_mode {
        InstrumentMode::Oracle => Some(cfg.spec()?),
        _ => None,
    };
    let fit = |sample: &PanelSample| two_step_estimate(sample, &lambda, &gmm, oracle);
    let path = ctx.out.join("result.json");
    if cfg.replications == 1 {
        let sample = data(ctx, 0)?;
        let result = fit(&sample)?;
        write_json(&path, &result)?;
        return Ok(Outcome { ambiguous: result.ambiguous(), files: vec![path] });
    }
    let reps: Vec<Replication> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = rep_seed(ctx.seed, r);
            match data(ctx, r).and_then(|s| Ok(fit(&s)?)) {
                Ok(res) => Replication { index: r, seed, result: Some(res), error: None },
                Err(e) => Replication { index: r, seed, result: None, error: Some(format!("{e:#}")) },
            }
        })
        .collect();
    let summary = summarize(&reps, cfg.spec.as_ref().map(|s| s.beta0()));
    if summary.failed == reps.len() {
        bail!("every replication failed; first error: {}", reps[0].error.as_deref().unwrap_or("unknown"));
    }
    let ambiguous = summary.ambiguous > 0;
    write_json(&path, &json!({ "summary": summary, "replications": reps }))?;
    Ok(Outcome { ambiguous, files: vec![path] })
}

fn scan_range(spec: &DgpSpec, c_range: Option<[f64; 2]>) -> (f64, f64) {
    match c_range {
        Some([lo, hi]) => (lo, hi),
        None => {
            let l = spec.dist().lambda_max();
            (0.5 / l, 2.0 * l)
        }
    }
}

fn identify(ctx: &RunContext) -> Result<Outcome> {
    let cfg = &ctx.config;
    let mut report = serde_json::Map::new();
    let mut files = Vec::new();
    let mut ambiguous = false;
    if let Some(spec) = &cfg.spec {
        let probes = default_probes(spec, cfg.probes, ctx.seed);
        if probes.is_empty() {
            bail!("no probe with distinct index values could be drawn from the covariate law");
        }
        let (lo, hi) = scan_range(spec, cfg.c_range);
        let scan = ray_scan(spec, &probes, (lo, hi))?;
        ambiguous = scan.roots.iter().any(|r| (r - 1.0).abs() > ROOT_MATCH_TOL);
        let grid: Vec<f64> = (0..SCAN_POINTS).map(|i| lo + (hi - lo) * i as f64 / (SCAN_POINTS - 1) as f64).collect();
        let curve = ray_scan_curve(spec, &probes, &grid)?;
        let scan_path = ctx.out.join("scan.csv");
        let mut w = BufWriter::new(File::create(&scan_path)?);
        writeln!(w, "c,objective")?;
        for (c, v) in &curve {
            writeln!(w, "{c},{v}")?;
        }
        w.flush()?;
        files.push(scan_path);
        report.insert("probes".into(), json!(probes));
        report.insert("ray_scan".into(), serde_json::to_value(&scan)?);
        report.insert("degeneracy".into(), serde_json::to_value(degenerate_check_spec(spec, ctx.seed)?)?);
        if !cfg.candidates.is_empty() {
            report.insert("rejection".into(), serde_json::to_value(rejection_scan(&cfg.candidates, spec, &probes)?)?);
        }
    }
    if let Some(input) = &cfg.input {
        let sample = read_sample(input)?;
        let lambda = cfg.lambda()?;
        report.insert("sample_degeneracy".into(), serde_json::to_value(degenerate_check_sample(&sample, &lambda, ctx.seed)?)?);
        report.insert("support".into(), serde_json::to_value(check_support_assumptions(&sample, None, None)?)?);
    }
    report.insert("ambiguous".into(), json!(ambiguous));
    let path = ctx.out.join("report.json");
    write_json(&path, &Value::Object(report))?;
    files.insert(0, path);
    Ok(Outcome { ambiguous, files })
}

fn bound(ctx: &RunContext) -> Result<Outcome> {
    let cfg = &ctx.config;
    let b = efficiency_bound(cfg.spec()?)?;
    let mut report = json!({
        "v0": matrix_rows(&b.v0),
        "information": matrix_rows(&b.information),
        "condition": b.condition,
        "degenerate_points": b.degenerate_points,
    });
    if let Some(n) = cfg.n {
        let se: Vec<f64> = (0..b.v0.nrows()).map(|i| (b.v0[(i, i)] / n as f64).sqrt()).collect();
        report["n"] = json!(n);
        report["se"] = json!(se);
    }
    let path = ctx.out.join("report.json");
    write_json(&path, &report)?;
    Ok(Outcome { ambiguous: false, files: vec![path] })
}

fn test_zero(ctx: &RunContext) -> Result<Outcome> {
    let cfg = &ctx.config;
    let [t, tp] = cfg.periods.context("missing key: periods")?;
    let tests: Vec<ZeroTest> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| Ok(test_beta_zero(&data(ctx, r)?, t, tp, cfg.bins)?))
        .collect::<Result<_>>()?;
    let report = if tests.len() == 1 {
        serde_json::to_value(&tests[0])?
    } else {
        let rejections = tests.iter().filter(|z| z.p_value < ZERO_TEST_LEVEL).count();
        json!({
            "level": ZERO_TEST_LEVEL,
            "rejection_rate": rejections as f64 / tests.len() as f64,
            "tests": tests,
        })
    };
    let path = ctx.out.join("report.json");
    write_json(&path, &report)?;
    Ok(Outcome { ambiguous: false, files: vec![path] })
}

fn moment(ctx: &RunContext) -> Result<Outcome> {
    let cfg = &ctx.config;
    let report = match &cfg.input {
        Some(input) => {
            let sample = read_sample(input)?;
            let lambda = cfg.lambda()?;
            let beta = cfg.beta.as_ref().context("missing key: beta")?;
            let k = sample.covariates();
            let n = sample.n();
            let mut mean = 0.0;
            let mut grad = vec![0.0; k];
            for i in 0..n {
                let (y, x) = (sample.unit_y(i), sample.unit_x(i));
                mean += moment_m(y, x, k, beta, &lambda)?.value;
                for (g, v) in grad.iter_mut().zip(grad_m(y, x, k, beta, &lambda)?) {
                    *g += v;
                }
            }
            grad.iter_mut().for_each(|g| *g /= n as f64);
            json!({ "beta": beta, "n": n, "mean_moment": mean / n as f64, "mean_gradient": grad })
        }
        None => {
            let spec = cfg.spec()?;
            let beta = cfg.beta.clone().unwrap_or_else(|| spec.beta0().to_vec());
            let points: Vec<(Vec<f64>, Option<f64>)> = match spec.support() {
                Some(s) => s.into_iter().map(|(x, p)| (x.to_vec(), Some(p))).collect(),
                None => default_probes(spec, cfg.probes, ctx.seed).into_iter().map(|x| (x, None)).collect(),
            };
            let rows = points
                .iter()
                .map(|(x, p)| {
                    let m = cond_moment(x, spec, &beta)?;
                    Ok(json!({ "x": x, "prob": p, "value": m.value, "relative": m.relative() }))
                })
                .collect::<Result<Vec<_>>>()?;
            json!({ "beta": beta, "points": rows })
        }
    };
    let path = ctx.out.join("report.json");
    write_json(&path, &report)?;
    Ok(Outcome { ambiguous: false, files: vec![path] })
}
