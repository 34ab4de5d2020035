//! Run configuration: a strict JSON document, checked per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use genlogit::dgp::{DgpSpec, XLaw};
use genlogit::gmm::{GmmConfig, InstrumentMode};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Simulate,
    Estimate,
    Identify,
    Bound,
    TestZero,
    Moment,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Estimate => "estimate",
            Subcommand::Identify => "identify",
            Subcommand::Bound => "bound",
            Subcommand::TestZero => "test-zero",
            Subcommand::Moment => "moment",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must agree with the subcommand given on the command line.
    pub subcommand: Option<Subcommand>,
    pub spec: Option<DgpSpec>,
    pub n: Option<usize>,
    pub gmm: Option<GmmConfig>,
    /// Kernel exponents for data read from `input`; defaults to the spec's.
    pub lambda: Option<Vec<f64>>,
    /// Panel CSV to read.
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    /// Period pair `(t, t')` of the zero test.
    pub periods: Option<[usize; 2]>,
    #[serde(default = "four")]
    pub bins: usize,
    /// Evaluation point of the `moment` subcommand.
    pub beta: Option<Vec<f64>>,
    /// Interval of the ray scan.
    pub c_range: Option<[f64; 2]>,
    #[serde(default = "twenty")]
    pub probes: usize,
    /// Points checked against the rejection sets by `identify`.
    #[serde(default)]
    pub candidates: Vec<Vec<f64>>,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

fn twenty() -> usize {
    20
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn check_lambda(lambda: &[f64]) -> Result<()> {
    match lambda.first() {
        None => bail!("lambda must not be empty"),
        Some(l) if *l != 1.0 => bail!("lambda[0] must be 1"),
        _ => {}
    }
    if lambda.windows(2).any(|w| !(w[1] > w[0])) {
        bail!("lambda must be strictly increasing");
    }
    Ok(())
}

fn kernel_spec(spec: &DgpSpec) -> Result<()> {
    if !spec.kernel_ready() {
        bail!(
            "this subcommand needs T = tau + 1 (got T = {}, tau = {}); only estimate accepts longer panels",
            spec.periods(),
            spec.dist().tau()
        );
    }
    Ok(())
}

impl RunConfig {
    /// Kernel exponents: `lambda` if given, else the spec's.
    pub fn lambda(&self) -> Result<Vec<f64>> {
        let lambda = match (&self.lambda, &self.spec) {
            (Some(l), _) => l.clone(),
            (None, Some(s)) => s.dist().lambda().to_vec(),
            (None, None) => bail!("missing key: lambda (or spec)"),
        };
        check_lambda(&lambda)?;
        Ok(lambda)
    }

    pub fn spec(&self) -> Result<&DgpSpec> {
        self.spec.as_ref().context("missing key: spec")
    }

    pub fn n(&self) -> Result<usize> {
        match self.n {
            Some(0) => bail!("n must be positive"),
            Some(n) => Ok(n),
            None => bail!("missing key: n"),
        }
    }

    /// Data comes from `input`, or from `spec` and `n` when no input is given.
    fn data_source(&self) -> Result<()> {
        if self.input.is_none() {
            self.spec().context("either input or spec and n are required")?;
            self.n()?;
        }
        Ok(())
    }

    pub fn validate(&self, sub: Subcommand) -> Result<()> {
        if let Some(s) = self.subcommand {
            if s != sub {
                bail!("config is for `{}` but `{}` was run", s.name(), sub.name());
            }
        }
        if self.replications == 0 {
            bail!("replications must be positive");
        }
        if let Some(l) = &self.lambda {
            check_lambda(l)?;
        }
        match sub {
            Subcommand::Simulate => {
                self.spec()?;
                self.n()?;
            }
            Subcommand::Estimate => {
                self.data_source()?;
                let gmm = self.gmm.as_ref().context("missing key: gmm")?;
                gmm.validate()?;
                self.lambda()?;
                if gmm.instrument_mode == InstrumentMode::Oracle {
                    self.spec().context("oracle instruments need the spec")?;
                }
                if self.input.is_some() && self.replications > 1 {
                    bail!("replications > 1 needs simulated data, not input");
                }
            }
            Subcommand::Identify => {
                if self.spec.is_none() && self.input.is_none() {
                    bail!("identify needs spec or input");
                }
                if let Some(spec) = &self.spec {
                    kernel_spec(spec)?;
                }
                if self.input.is_some() {
                    self.lambda()?;
                }
                if let Some([lo, hi]) = self.c_range {
                    if !(lo < hi && lo > 0.0) {
                        bail!("c_range must satisfy 0 < lo < hi");
                    }
                }
            }
            Subcommand::Bound => {
                let spec = self.spec()?;
                if !matches!(spec.xlaw(), XLaw::FiniteSupport { .. }) {
                    bail!("bound needs a finite covariate support: use an xlaw of kind finite_support (FiniteSupport)");
                }
                kernel_spec(spec)?;
            }
            Subcommand::TestZero => {
                self.data_source()?;
                let [t, tp] = self.periods.context("missing key: periods (the pair t, t')")?;
                if t == tp {
                    bail!("periods must be two different periods");
                }
                if self.input.is_some() && self.replications > 1 {
                    bail!("replications > 1 needs simulated data, not input");
                }
                if self.bins == 0 {
                    bail!("bins must be positive");
                }
            }
            Subcommand::Moment => {
                if self.input.is_some() {
                    self.beta.as_ref().context("missing key: beta")?;
                    self.lambda()?;
                } else {
                    kernel_spec(self.spec().context("moment needs input or spec")?)?;
                }
            }
        }
        Ok(())
    }
}
