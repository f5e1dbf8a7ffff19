//! Static coherent risk measures on finite distributions.
//!
//! Every measure here is represented through its dual form: a risk measure
//! reweights the outcome distribution adversarially inside its risk
//! envelope, and the risk value is the expectation under the reweighted
//! distribution. For the sample-average case (uniform weights `1/m`) the
//! optimal reweighting has a closed form:
//!
//! * CVaR(α): mass `1/(m·α)` on every sample strictly below VaR_α, the
//!   leftover mass on the VaR_α sample(s), nothing above.
//! * Wang(η): the `i`-th worst sample receives `g(i/m) − g((i−1)/m)` with
//!   `g(τ) = Φ(Φ⁻¹(τ) + η)`.
//!
//! Exact value ties are resolved by computing per-rank masses on a stable
//! `(value, payload)` ordering and then spreading each tie group's total
//! mass evenly over its members. This keeps the output a valid distribution
//! and makes [`risk_value`] invariant to the order of the support.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::normal;

const WEIGHT_TOL: f64 = 1e-9;
const UNIFORM_TOL: f64 = 1e-12;

static CVAR_SORT_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, [`cvar_perturbation`] ranks samples best-first
/// instead of worst-first. Used by the oracle suite's negative control.
#[doc(hidden)]
pub fn set_cvar_sort_fault(enabled: bool) {
    CVAR_SORT_FAULT.store(enabled, AtomicOrdering::SeqCst);
}

/// A finite distribution over real values. Each support point also carries
/// an opaque payload index (e.g. the candidate successor it came from).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    values: Vec<f64>,
    payloads: Vec<usize>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(values: Vec<f64>, payloads: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySupport);
        }
        if values.len() != weights.len() || values.len() != payloads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values, {} payloads, {} weights",
                values.len(),
                payloads.len(),
                weights.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("support value {v}")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDistribution(format!("weight {w} is not a probability")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self {
            values,
            payloads,
            weights,
        })
    }

    /// Uniform `1/m` weights; payloads are the positions `0..m`.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let payloads = (0..values.len()).collect();
        Self::uniform_with_payloads(values, payloads)
    }

    pub fn uniform_with_payloads(values: Vec<f64>, payloads: Vec<usize>) -> Result<Self> {
        let m = values.len();
        if m == 0 {
            return Err(Error::EmptySupport);
        }
        Self::new(values, payloads, vec![1.0 / m as f64; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn payloads(&self) -> &[usize] {
        &self.payloads
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= UNIFORM_TOL)
    }

    pub fn expectation(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum()
    }

    /// Indices of the support sorted worst-first, ties broken by payload.
    fn ascending_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.values[a]
                .partial_cmp(&self.values[b])
                .unwrap_or(Ordering::Equal)
                .then(self.payloads[a].cmp(&self.payloads[b]))
        });
        idx
    }

    fn require_uniform(&self) -> Result<()> {
        if self.is_uniform() {
            Ok(())
        } else {
            Err(Error::InvalidDistribution(
                "risk perturbations are defined for uniform sample weights only".into(),
            ))
        }
    }
}

/// Which static risk measure to apply, with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RiskSpec {
    Neutral,
    /// Conditional value at risk at level `alpha ∈ (0, 1]`.
    Cvar { alpha: f64 },
    /// Wang transform with distortion parameter `eta ≥ 0`.
    Wang { eta: f64 },
}

impl RiskSpec {
    pub fn cvar(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self::Cvar { alpha })
    }

    pub fn wang(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self::Wang { eta })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskSpec::Neutral => Ok(()),
            RiskSpec::Cvar { alpha } => check_alpha(alpha),
            RiskSpec::Wang { eta } => check_eta(eta),
        }
    }

    pub fn is_neutral(&self) -> bool {
        matches!(self, RiskSpec::Neutral)
    }
}

impl fmt::Display for RiskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskSpec::Neutral => write!(f, "neutral"),
            RiskSpec::Cvar { alpha } => write!(f, "cvar:{alpha}"),
            RiskSpec::Wang { eta } => write!(f, "wang:{eta}"),
        }
    }
}

impl FromStr for RiskSpec {
    type Err = Error;

    /// Parses `neutral`, `cvar:<alpha>` or `wang:<eta>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "neutral" {
            return Ok(RiskSpec::Neutral);
        }
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad risk spec `{s}` (want neutral|cvar:A|wang:E)")))?;
        let value: f64 = param
            .parse()
            .map_err(|_| Error::Config(format!("bad risk parameter `{param}`")))?;
        match kind {
            "cvar" => RiskSpec::cvar(value),
            "wang" => RiskSpec::wang(value),
            _ => Err(Error::Config(format!("unknown risk measure `{kind}`"))),
        }
    }
}

impl TryFrom<String> for RiskSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RiskSpec> for String {
    fn from(r: RiskSpec) -> String {
        r.to_string()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(invalid("alpha", alpha, "must lie in (0, 1]"))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta >= 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(invalid("eta", eta, "must be finite and >= 0"))
    }
}

/// Perturbed probabilities `ξ(s')·T̂(s')`, aligned with the support of the
/// distribution they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationWeights {
    probabilities: Vec<f64>,
}

impl PerturbationWeights {
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probabilities
    }

    pub fn sum(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// Σ pᵢ·vᵢ.
    pub fn expectation_of(&self, values: &[f64]) -> f64 {
        self.probabilities
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }
}

/// Assigns per-rank masses (rank 0 = worst) to the support and averages the
/// mass within each group of exactly tied values.
fn assign_ranked_masses(dist: &DiscreteDistribution, order: &[usize], rank_mass: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dist.len()];
    let mut start = 0;
    while start < order.len() {
        let v = dist.values[order[start]];
        let mut end = start + 1;
        while end < order.len() && dist.values[order[end]] == v {
            end += 1;
        }
        let group_mass: f64 = rank_mass[start..end].iter().sum();
        let share = group_mass / (end - start) as f64;
        for &i in &order[start..end] {
            out[i] = share;
        }
        start = end;
    }
    out
}

/// Adversarial CVaR reweighting of a uniform sample distribution.
pub fn cvar_perturbation(dist: &DiscreteDistribution, alpha: f64) -> Result<PerturbationWeights> {
    check_alpha(alpha)?;
    dist.require_uniform()?;
    let m = dist.len();
    let mut order = dist.ascending_order();
    if CVAR_SORT_FAULT.load(AtomicOrdering::SeqCst) {
        order.reverse();
    }
    let cap = 1.0 / (m as f64 * alpha);
    // VaR_α is the first rank whose cumulative uniform mass reaches α.
    let var_rank = (0..m)
        .find(|&k| (k + 1) as f64 / m as f64 >= alpha - 1e-12)
        .unwrap_or(m - 1);
    let mut rank_mass = vec![0.0; m];
    for mass in rank_mass.iter_mut().take(var_rank) {
        *mass = cap;
    }
    rank_mass[var_rank] = (1.0 - var_rank as f64 * cap).max(0.0);
    Ok(PerturbationWeights {
        probabilities: assign_ranked_masses(dist, &order, &rank_mass),
    })
}

/// The Wang distortion `g(τ) = Φ(Φ⁻¹(τ) + η)`.
pub fn wang_distortion(tau: f64, eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid("tau", tau, "must lie in [0, 1]"));
    }
    check_eta(eta)?;
    Ok(distort(tau, eta))
}

fn distort(tau: f64, eta: f64) -> f64 {
    if tau <= 0.0 {
        0.0
    } else if tau >= 1.0 {
        1.0
    } else {
        normal::cdf(normal::quantile(tau) + eta)
    }
}

/// Wang-transform reweighting of a uniform sample distribution.
pub fn wang_perturbation(dist: &DiscreteDistribution, eta: f64) -> Result<PerturbationWeights> {
    check_eta(eta)?;
    dist.require_uniform()?;
    let m = dist.len();
    let order = dist.ascending_order();
    let mut rank_mass = Vec::with_capacity(m);
    let mut prev = 0.0;
    for i in 1..=m {
        let g = if i == m { 1.0 } else { distort(i as f64 / m as f64, eta) };
        rank_mass.push(g - prev);
        prev = g;
    }
    Ok(PerturbationWeights {
        probabilities: assign_ranked_masses(dist, &order, &rank_mass),
    })
}

/// Leaves the distribution unchanged.
pub fn neutral_perturbation(dist: &DiscreteDistribution) -> PerturbationWeights {
    PerturbationWeights {
        probabilities: dist.weights.clone(),
    }
}

/// Dispatches to the perturbation for `spec`.
pub fn perturb(dist: &DiscreteDistribution, spec: RiskSpec) -> Result<PerturbationWeights> {
    match spec {
        RiskSpec::Neutral => Ok(neutral_perturbation(dist)),
        RiskSpec::Cvar { alpha } => cvar_perturbation(dist, alpha),
        RiskSpec::Wang { eta } => wang_perturbation(dist, eta),
    }
}

/// ρ(Z) as the expectation under the adversarially perturbed weights.
pub fn risk_value(dist: &DiscreteDistribution, spec: RiskSpec) -> Result<f64> {
    Ok(perturb(dist, spec)?.expectation_of(&dist.values))
}

/// Empirical CVaR of a return sample: mean of the `⌈α·n⌉` smallest values.
pub fn static_cvar_of_samples(returns: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if returns.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = sorted.len();
    // Guard against α·n landing a hair above an integer.
    let k = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Closed-form CVaR_α of N(μ, σ²):  μ − σ·φ(Φ⁻¹(α))/α.
pub fn gaussian_cvar(mu: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", alpha, "must lie in (0, 1)"));
    }
    if !(sigma >= 0.0) {
        return Err(invalid("sigma", sigma, "must be >= 0"));
    }
    Ok(mu - sigma * normal::pdf(normal::quantile(alpha)) / alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::uniform(v.to_vec()).unwrap()
    }

    #[test]
    fn cvar_half_of_four() {
        let p = cvar_perturbation(&uniform(&[1.0, 2.0, 3.0, 4.0]), 0.5).unwrap();
        assert_eq!(p.probabilities(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn cvar_alpha_one_is_uniform() {
        let p = cvar_perturbation(&uniform(&[3.0, -1.0, 7.0, 0.5, 2.0]), 1.0).unwrap();
        for q in p.probabilities() {
            assert!((q - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_tenth_of_ten_picks_worst() {
        let vals = [5.0, 3.0, 9.0, 1.0, 7.0, 2.0, 8.0, 4.0, 6.0, 0.5];
        let p = cvar_perturbation(&uniform(&vals), 0.1).unwrap();
        for (i, q) in p.probabilities().iter().enumerate() {
            let expected = if i == 9 { 1.0 } else { 0.0 };
            assert!((q - expected).abs() < 1e-12, "index {i}: {q}");
        }
    }

    #[test]
    fn cvar_ties_split_evenly() {
        // VaR_0.5 of [1,2,2,2] is 2; one sample below gets 1/(4·0.5)=0.5,
        // the tied group shares the remaining 0.5.
        let p = cvar_perturbation(&uniform(&[2.0, 1.0, 2.0, 2.0]), 0.5).unwrap();
        let probs = p.probabilities();
        assert!((probs[1] - 0.5).abs() < 1e-12);
        for i in [0, 2, 3] {
            assert!((probs[i] - 0.5 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_rejects_bad_alpha_and_nonuniform() {
        let d = uniform(&[1.0, 2.0]);
        assert!(cvar_perturbation(&d, 0.0).is_err());
        assert!(cvar_perturbation(&d, 1.5).is_err());
        let skewed = DiscreteDistribution::new(vec![1.0, 2.0], vec![0, 1], vec![0.3, 0.7]).unwrap();
        assert!(cvar_perturbation(&skewed, 0.5).is_err());
        assert!(DiscreteDistribution::uniform(vec![]).is_err());
    }

    #[test]
    fn wang_distortion_values() {
        assert!((wang_distortion(0.5, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((wang_distortion(0.5, 0.5).unwrap() - 0.691_462_461_274_013_1).abs() < 1e-12);
        assert_eq!(wang_distortion(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(wang_distortion(1.0, 3.0).unwrap(), 1.0);
        assert!(wang_distortion(1.2, 0.1).is_err());
        assert!(wang_distortion(0.5, -0.1).is_err());
    }

    #[test]
    fn wang_perturbation_examples() {
        let p = wang_perturbation(&uniform(&[1.0, 2.0]), 0.0).unwrap();
        assert!((p.probabilities()[0] - 0.5).abs() < 1e-12);
        let p = wang_perturbation(&uniform(&[2.0, 1.0]), 0.5).unwrap();
        // worst sample is at index 1
        assert!((p.probabilities()[1] - 0.691_462_461_274_013_1).abs() < 1e-12);
        assert!((p.probabilities()[0] - 0.308_537_538_725_986_9).abs() < 1e-12);
        let p = wang_perturbation(&uniform(&[4.0, 3.0, 2.0, 1.0]), 10.0).unwrap();
        assert!(p.probabilities()[3] > 1.0 - 1e-9);
        assert!(wang_perturbation(&uniform(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn neutral_is_identity() {
        let d = DiscreteDistribution::new(vec![1.0, 2.0], vec![0, 1], vec![0.3, 0.7]).unwrap();
        assert_eq!(neutral_perturbation(&d).probabilities(), &[0.3, 0.7]);
        let u = uniform(&[0.0; 10]);
        assert!(neutral_perturbation(&u).probabilities().iter().all(|p| (*p - 0.1).abs() < 1e-15));
        assert!((risk_value(&d, RiskSpec::Neutral).unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn risk_value_examples() {
        let d = uniform(&[1.0, 2.0, 3.0, 4.0]);
        assert!((risk_value(&d, RiskSpec::cvar(0.5).unwrap()).unwrap() - 1.5).abs() < 1e-12);
        assert!((risk_value(&d, RiskSpec::Neutral).unwrap() - 2.5).abs() < 1e-12);
        let c = uniform(&[3.25; 7]);
        for spec in [RiskSpec::Neutral, RiskSpec::Cvar { alpha: 0.2 }, RiskSpec::Wang { eta: 2.0 }] {
            assert!((risk_value(&c, spec).unwrap() - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn static_cvar_examples() {
        let r: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(static_cvar_of_samples(&r, 0.1).unwrap(), 0.0);
        assert_eq!(static_cvar_of_samples(&r, 1.0).unwrap(), 4.5);
        assert_eq!(static_cvar_of_samples(&[2.5; 20], 0.1).unwrap(), 2.5);
        // worst two of twenty
        let r: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(static_cvar_of_samples(&r, 0.1).unwrap(), 0.5);
        assert!(static_cvar_of_samples(&[], 0.1).is_err());
    }

    #[test]
    fn gaussian_cvar_closed_form() {
        let v = gaussian_cvar(0.0, 1.0, 0.5).unwrap();
        assert!((v + (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert_eq!(gaussian_cvar(4.0, 0.0, 0.3).unwrap(), 4.0);
        assert!((gaussian_cvar(5.0, 2.0, 0.1).unwrap() - 1.490_033_361_350_263_4).abs() < 1e-10);
        assert!(gaussian_cvar(0.0, 1.0, 0.0).is_err());
        assert!(gaussian_cvar(0.0, 1.0, 1.0).is_err());
        assert!(gaussian_cvar(0.0, 1.0, 0.1).unwrap() > gaussian_cvar(0.0, 2.0, 0.1).unwrap());
    }

    #[test]
    fn wang_limit_is_uniform() {
        let d = uniform(&[0.3, -2.0, 1.0, 8.0, 4.0]);
        let p = wang_perturbation(&d, 1e-8).unwrap();
        assert!(p.probabilities().iter().all(|q| (q - 0.2).abs() <= 1e-6));
    }

    #[test]
    fn risk_spec_parse_round_trip() {
        for s in ["neutral", "cvar:0.5", "wang:0.75"] {
            let spec: RiskSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("cvar:0".parse::<RiskSpec>().is_err());
        assert!("wang:-1".parse::<RiskSpec>().is_err());
        assert!("entropic:1".parse::<RiskSpec>().is_err());
    }

    fn values_strategy() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so that exact ties occur regularly.
        prop::collection::vec((-40i32..40).prop_map(|x| f64::from(x) * 0.25), 1..40)
    }

    /// Rockafellar-Uryasev primal form, maximised over support points.
    fn cvar_primal(values: &[f64], alpha: f64) -> f64 {
        let m = values.len() as f64;
        values
            .iter()
            .map(|&z| z - values.iter().map(|v| (z - v).max(0.0)).sum::<f64>() / (m * alpha))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    proptest! {
        #[test]
        fn cvar_envelope_feasible(values in values_strategy(), alpha in 0.01f64..=1.0) {
            let m = values.len();
            let p = cvar_perturbation(&uniform(&values), alpha).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            for q in p.probabilities() {
                prop_assert!(*q >= 0.0 && *q <= 1.0 / (m as f64 * alpha) + 1e-9);
            }
        }

        #[test]
        fn cvar_matches_primal(values in values_strategy(), alpha in 0.01f64..=1.0) {
            let rv = risk_value(&uniform(&values), RiskSpec::Cvar { alpha }).unwrap();
            prop_assert!((rv - cvar_primal(&values, alpha)).abs() < 1e-9);
        }

        #[test]
        fn dominance_and_monotone_alpha(values in values_strategy(), a1 in 0.01f64..=1.0, a2 in 0.01f64..=1.0) {
            let d = uniform(&values);
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let neutral = risk_value(&d, RiskSpec::Neutral).unwrap();
            let r_lo = risk_value(&d, RiskSpec::Cvar { alpha: lo }).unwrap();
            let r_hi = risk_value(&d, RiskSpec::Cvar { alpha: hi }).unwrap();
            prop_assert!(r_lo <= r_hi + 1e-12);
            prop_assert!(r_hi <= neutral + 1e-12);
            let w = risk_value(&d, RiskSpec::Wang { eta: 0.75 }).unwrap();
            prop_assert!(w <= neutral + 1e-12);
        }

        #[test]
        fn coherence_spot_checks(values in values_strategy(), lambda in 0.1f64..10.0, shift in -5.0f64..5.0) {
            for spec in [RiskSpec::Neutral, RiskSpec::Cvar { alpha: 0.3 }, RiskSpec::Wang { eta: 0.5 }] {
                let base = risk_value(&uniform(&values), spec).unwrap();
                let scaled: Vec<f64> = values.iter().map(|v| v * lambda).collect();
                let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
                let rs = risk_value(&uniform(&scaled), spec).unwrap();
                let rt = risk_value(&uniform(&shifted), spec).unwrap();
                prop_assert!((rs - lambda * base).abs() < 1e-9 * (1.0 + rs.abs()));
                prop_assert!((rt - (base + shift)).abs() < 1e-9 * (1.0 + rt.abs()));
            }
        }

        #[test]
        fn permutation_invariance(values in values_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm = values.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for spec in [RiskSpec::Cvar { alpha: 0.37 }, RiskSpec::Wang { eta: 0.75 }] {
                let a = risk_value(&uniform(&values), spec).unwrap();
                let b = risk_value(&uniform(&perm), spec).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn wang_valid_and_pessimistic(values in values_strategy(), eta in 0.0f64..10.0) {
            let d = uniform(&values);
            let p = wang_perturbation(&d, eta).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.probabilities().iter().all(|q| *q >= -1e-15));
        }
    }
}
