//! The generalized logistic family of shock distributions.
//!
//! A distribution of the *first type* has odds `G(u) = F(u)/(1-F(u))` equal
//! to a positive combination of exponentials `sum_j w_j exp(lambda_j u)`;
//! the *second type* has inverse odds `sum_j w_j exp(-lambda_j u)`. The
//! scale is pinned by `lambda[0] = 1`. Everything is evaluated through the
//! log-odds, which is a log-sum-exp and never overflows for moderate `u`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dgp::PanelSample;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// Largest number of exponential terms accepted.
pub const MAX_TAU: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyType {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GenLogisticRaw", into = "GenLogisticRaw")]
pub struct GenLogistic {
    family: FamilyType,
    lambda: Vec<f64>,
    w: Vec<f64>,
    // ln w_j, -inf for zero weights
    log_w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenLogisticRaw {
    #[serde(rename = "type")]
    family: FamilyType,
    lambda: Vec<f64>,
    w: Vec<f64>,
}

impl TryFrom<GenLogisticRaw> for GenLogistic {
    type Error = Error;
    fn try_from(raw: GenLogisticRaw) -> Result<Self> {
        GenLogistic::new(raw.family, raw.lambda, raw.w)
    }
}

impl From<GenLogistic> for GenLogisticRaw {
    fn from(d: GenLogistic) -> Self {
        GenLogisticRaw { family: d.family, lambda: d.lambda, w: d.w }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_infinite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logistic sigmoid `1/(1+exp(-z))`, accurate in both tails.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(z))`.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl GenLogistic {
    pub fn new(family: FamilyType, lambda: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidDistribution(msg.to_string()));
        if lambda.is_empty() {
            return bad("lambda must have at least one entry");
        }
        if lambda.len() > MAX_TAU {
            return bad(&format!("at most {MAX_TAU} exponential terms are supported"));
        }
        if lambda.len() != w.len() {
            return bad("lambda and w must have the same length");
        }
        if lambda[0] != 1.0 {
            return bad("lambda[0] must be 1");
        }
        if lambda.iter().any(|l| !l.is_finite()) || lambda.windows(2).any(|p| p[1] <= p[0]) {
            return bad("lambda must be finite and strictly ascending");
        }
        if !(w[0] > 0.0) || !w[0].is_finite() {
            return bad("w[0] must be positive");
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("w entries must be finite and non-negative");
        }
        let log_w = w.iter().map(|v| v.ln()).collect();
        Ok(GenLogistic { family, lambda, w, log_w })
    }

    /// First-type distribution.
    pub fn first(lambda: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        Self::new(FamilyType::First, lambda, w)
    }

    /// The standard logistic distribution.
    pub fn logit() -> Self {
        Self::first(vec![1.0], vec![1.0]).expect("valid")
    }

    pub fn family(&self) -> FamilyType {
        self.family
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Number of exponential terms.
    pub fn tau(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda_max(&self) -> f64 {
        *self.lambda.last().expect("non-empty")
    }

    /// Same `(lambda, w)` with the family flag replaced.
    pub fn with_family(&self, family: FamilyType) -> Self {
        GenLogistic { family, ..self.clone() }
    }

    fn first_type_log_odds(&self, u: f64) -> f64 {
        log_sum_exp(self.log_w.iter().zip(&self.lambda).map(move |(lw, l)| lw + l * u))
    }

    /// `ln(F(u)/(1-F(u)))`.
    pub fn log_odds(&self, u: f64) -> f64 {
        match self.family {
            FamilyType::First => self.first_type_log_odds(u),
            FamilyType::Second => -self.first_type_log_odds(-u),
        }
    }

    /// Odds `F(u)/(1-F(u))`; equals `sum_j w_j exp(lambda_j u)` for the first type.
    pub fn odds(&self, u: f64) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::Domain(format!("odds argument {u} is not finite")));
        }
        let g = self.log_odds(u).exp();
        if g.is_finite() && g > 0.0 {
            Ok(g)
        } else {
            Err(Error::NonFinite(format!("odds overflow at u = {u}")))
        }
    }

    pub fn cdf(&self, u: f64) -> f64 {
        sigmoid(self.log_odds(u))
    }

    /// `1 - F(u)` without cancellation.
    pub fn sf(&self, u: f64) -> f64 {
        sigmoid(-self.log_odds(u))
    }

    /// `ln(1 + G(u))`, i.e. `-ln(1 - F(u))`.
    pub fn log1p_odds(&self, u: f64) -> f64 {
        softplus(self.log_odds(u))
    }

    /// `F'/(F(1-F))`, the derivative of the log-odds. Lies in `[1, lambda_max]`.
    pub fn score_weight(&self, u: f64) -> f64 {
        let sign = match self.family {
            FamilyType::First => 1.0,
            FamilyType::Second => -1.0,
        };
        let logits: Vec<f64> =
            self.log_w.iter().zip(&self.lambda).map(|(lw, l)| lw + sign * l * u).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (z, l) in logits.iter().zip(&self.lambda) {
            let e = (z - max).exp();
            num += e * l;
            den += e;
        }
        (num / den).clamp(1.0, self.lambda_max())
    }

    pub fn pdf(&self, u: f64) -> f64 {
        let lo = self.log_odds(u);
        self.score_weight(u) * sigmoid(lo) * sigmoid(-lo)
    }

    /// Inverse cdf: expanding bracket, bisection to 1e-12, one Newton polish.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
        }
        let target = p.ln() - (-p).ln_1p();
        let f = |u: f64| self.log_odds(u) - target;
        let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
        while f(lo) > 0.0 {
            lo *= 2.0;
            if lo < -1e300 {
                return Err(Error::NonFinite("quantile bracket diverged".into()));
            }
        }
        while f(hi) < 0.0 {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::NonFinite("quantile bracket diverged".into()));
            }
        }
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            let v = f(mid);
            if v == 0.0 {
                return Ok(mid);
            } else if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if mid == lo && mid == hi {
                break;
            }
        }
        let mid = 0.5 * (lo + hi);
        let dens = self.pdf(mid);
        if dens > 0.0 {
            let polished = mid - (self.cdf(mid) - p) / dens;
            if polished >= lo - 1e-12 && polished <= hi + 1e-12 {
                return Ok(polished);
            }
        }
        Ok(mid)
    }

    /// One draw by inverse transform from a caller-owned stream.
    pub fn draw(&self, rng: &mut Rng) -> f64 {
        loop {
            let p: f64 = rng.random();
            if p > 0.0 {
                return self.quantile(p).expect("p in (0,1)");
            }
        }
    }

    /// `n` i.i.d. draws, deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }
}

/// Maps a second-type model onto the equivalent first-type one by sending
/// `(y_t, x_t)` to `(1 - y_t, -x_t)`. First-type inputs pass through.
pub fn normalize_to_first_type(
    dist: &GenLogistic,
    sample: &PanelSample,
) -> (GenLogistic, PanelSample) {
    match dist.family() {
        FamilyType::First => (dist.clone(), sample.clone()),
        FamilyType::Second => {
            let mut out = sample.clone();
            out.flip();
            (dist.with_family(FamilyType::First), out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_term() -> GenLogistic {
        GenLogistic::first(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn odds_examples() {
        assert_eq!(GenLogistic::logit().odds(0.0).unwrap(), 1.0);
        assert_relative_eq!(two_term().odds(0.0).unwrap(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(GenLogistic::logit().odds(3f64.ln()).unwrap(), 3.0, epsilon = 1e-14);
        assert!(GenLogistic::logit().odds(1e4).is_err());
        assert!(GenLogistic::logit().odds(f64::NAN).is_err());
    }

    #[test]
    fn cdf_and_pdf_examples() {
        let logit = GenLogistic::logit();
        assert_eq!(logit.cdf(0.0), 0.5);
        assert_relative_eq!(two_term().cdf(0.0), 2.0 / 3.0, epsilon = 1e-15);
        assert!(logit.cdf(-50.0) < 1e-20);
        assert_relative_eq!(logit.pdf(0.0), 0.25, epsilon = 1e-15);
        assert_relative_eq!(two_term().pdf(0.0), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn pdf_integrates_to_one() {
        // composite Simpson on [-40, 40], the oracle for the unit-mass check
        let d = two_term();
        let n = 200_000;
        let h = 80.0 / n as f64;
        let mut s = d.pdf(-40.0) + d.pdf(40.0);
        for i in 1..n {
            let u = -40.0 + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * d.pdf(u);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(GenLogistic::logit().quantile(0.5).unwrap(), 0.0);
        assert!(two_term().quantile(2.0 / 3.0).unwrap().abs() < 1e-9);
        for u in -5..=5 {
            let d = two_term();
            let back = d.quantile(d.cdf(u as f64)).unwrap();
            assert!((back - u as f64).abs() < 1e-9);
        }
        assert!(GenLogistic::logit().quantile(0.0).is_err());
        assert!(GenLogistic::logit().quantile(1.0).is_err());
    }

    #[test]
    fn score_weight_examples() {
        assert_eq!(GenLogistic::logit().score_weight(3.7), 1.0);
        assert_relative_eq!(two_term().score_weight(0.0), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let d = GenLogistic::logit();
        assert_eq!(d.sample(100, 9), d.sample(100, 9));
        let n = 1_000_000;
        let mean = d.sample(n, 1).iter().sum::<f64>() / n as f64;
        let sd = std::f64::consts::PI / 3f64.sqrt();
        assert!(mean.abs() < 4.0 * sd / 1000.0);
    }

    #[test]
    fn kolmogorov_smirnov_against_cdf() {
        let d = GenLogistic::first(vec![1.0, 2.5], vec![0.7, 0.4]).unwrap();
        let n = 100_000;
        let mut xs = d.sample(n, 42);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = d.cdf(*x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "ks = {ks}");
    }

    #[test]
    fn validation_errors() {
        assert!(GenLogistic::first(vec![2.0, 3.0], vec![1.0, 1.0]).is_err());
        assert!(GenLogistic::first(vec![1.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GenLogistic::first(vec![1.0, 2.0], vec![0.0, 1.0]).is_err());
        assert!(GenLogistic::first(vec![1.0, 2.0], vec![1.0, -1.0]).is_err());
        assert!(GenLogistic::first(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(GenLogistic::first((1..=9).map(f64::from).collect(), vec![1.0; 9]).is_err());
    }

    #[test]
    fn second_type_mirrors_first() {
        let first = two_term();
        let second = first.with_family(FamilyType::Second);
        for u in [-3.0, -0.2, 0.0, 1.5] {
            assert_relative_eq!(second.cdf(u), 1.0 - first.cdf(-u), epsilon = 1e-14);
            assert_relative_eq!(second.pdf(u), first.pdf(-u), epsilon = 1e-14);
        }
    }

    #[test]
    fn serde_round_trip_and_strictness() {
        let d: GenLogistic =
            serde_json::from_str(r#"{"type":"first","lambda":[1.0,2.0],"w":[1.0,0.5]}"#).unwrap();
        assert_eq!(d.w(), &[1.0, 0.5]);
        let back: GenLogistic = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        let err = serde_json::from_str::<GenLogistic>(r#"{"type":"first","lambda":[2.0],"w":[1.0]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("lambda[0] must be 1"));
        assert!(serde_json::from_str::<GenLogistic>(
            r#"{"type":"first","lambda":[1.0],"w":[1.0],"extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn logit_quantile_round_trip_on_wide_range() {
        let d = GenLogistic::logit();
        for i in 0..=200 {
            let u = -10.0 + 0.1 * i as f64;
            assert!((d.quantile(d.cdf(u)).unwrap() - u).abs() < 1e-9);
        }
    }

    fn arb_dist() -> impl Strategy<Value = GenLogistic> {
        (1usize..=4)
            .prop_flat_map(|tau| {
                (
                    proptest::collection::vec(0.05f64..1.5, tau - 1),
                    proptest::collection::vec(0.0f64..3.0, tau - 1),
                    0.05f64..3.0,
                )
            })
            .prop_map(|(gaps, rest, w0)| {
                let mut lambda = vec![1.0];
                for g in gaps {
                    let last = *lambda.last().unwrap();
                    lambda.push(last + g);
                }
                let mut w = vec![w0];
                w.extend(rest);
                GenLogistic::first(lambda, w).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn cdf_monotone_on_grid(d in arb_dist()) {
            let (mut prev, mut prev_lo) = (-1.0, f64::NEG_INFINITY);
            for i in 0..1000 {
                let u = -30.0 + 60.0 * i as f64 / 999.0;
                let (f, lo) = (d.cdf(u), d.log_odds(u));
                prop_assert!(lo > prev_lo);
                // below one ulp of change F may repeat
                prop_assert!(f > prev || (f == prev && d.pdf(u) * 60.0 / 999.0 < 4.0 * f64::EPSILON));
                prev = f;
                prev_lo = lo;
            }
        }

        #[test]
        fn pdf_matches_finite_difference(d in arb_dist(), u in -8.0f64..8.0) {
            let h = 1e-5;
            let fd = (d.cdf(u + h) - d.cdf(u - h)) / (2.0 * h);
            let p = d.pdf(u);
            prop_assert!(p >= 0.0);
            prop_assert!((fd - p).abs() <= 1e-6 * p.max(1e-3));
        }

        #[test]
        fn quantile_inverts_cdf(d in arb_dist(), u in -10.0f64..10.0) {
            // beyond this the cdf itself no longer resolves u in f64
            prop_assume!(d.cdf(u).min(d.sf(u)) > 1e-6);
            let back = d.quantile(d.cdf(u)).unwrap();
            prop_assert!((back - u).abs() < 1e-9, "u={} back={}", u, back);
        }

        #[test]
        fn score_weight_bounded(d in arb_dist(), u in -50.0f64..50.0) {
            let s = d.score_weight(u);
            prop_assert!(s >= 1.0 && s <= d.lambda_max());
        }
    }
}
