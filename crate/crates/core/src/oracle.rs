//! Self-check suites behind `riskmbrl oracle-tests`.
//!
//! Each suite compares the library against an independent computation and
//! returns a [`SuiteResult`]. Suites are deterministic for a given seed.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_stratified_ensemble, SyntheticGaussianSpec};
use crate::env::random_tabular_mdp;
use crate::error::Result;
use crate::normal;
use crate::risk::{cvar_perturbation, gaussian_cvar, wang_perturbation, DiscreteDistribution, RiskSpec};
use crate::tabular::{dynamic_risk_bruteforce, risk_policy_evaluation, PolicyTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// `max_t { t − E[(t − X)⁺] / α }` over the sample points, which is exact
/// for a uniform discrete distribution.
pub fn cvar_primal(xs: &[f64], alpha: f64) -> f64 {
    let n = xs.len() as f64;
    xs.iter()
        .map(|&t| t - xs.iter().map(|&x| (t - x).max(0.0)).sum::<f64>() / (n * alpha))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sum, upper-bound and primal-value checks of the CVaR weights, sum checks
/// of the Wang weights.
pub fn envelope_suite(seed: u64) -> SuiteResult {
    timed("risk-envelope", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_sum: f64 = 0.0;
        let mut worst_bound: f64 = f64::NEG_INFINITY;
        let mut worst_primal: f64 = 0.0;
        for _ in 0..200 {
            let m = rng.random_range(2..=50);
            let xs: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
            let dist = DiscreteDistribution::uniform(xs.clone())?;
            for alpha in [0.05, 0.1, 0.5, 1.0] {
                let w = cvar_perturbation(&dist, alpha)?;
                worst_sum = worst_sum.max((w.sum() - 1.0).abs());
                let cap = 1.0 / (m as f64 * alpha);
                for &p in w.probabilities() {
                    worst_bound = worst_bound.max(p - cap);
                }
                worst_primal = worst_primal.max((w.expectation_of(&xs) - cvar_primal(&xs, alpha)).abs());
            }
            for eta in [0.0, 0.1, 0.5, 0.75, 10.0] {
                let w = wang_perturbation(&dist, eta)?;
                worst_sum = worst_sum.max((w.sum() - 1.0).abs());
            }
        }
        let passed = worst_sum <= 1e-9 && worst_bound <= 1e-9 && worst_primal <= 1e-9;
        Ok((
            passed,
            format!("max |Σp−1| {worst_sum:.1e}, max p−cap {worst_bound:.1e}, max |E_p−primal| {worst_primal:.1e}"),
        ))
    })
}

/// Mean of the worst `⌈αn⌉` draws.
fn tail_mean(mut xs: Vec<f64>, alpha: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = ((alpha * xs.len() as f64).ceil() as usize).max(1);
    xs[..k].iter().sum::<f64>() / k as f64
}

/// Closed-form Gaussian CVaR against `−√(2/π)` and Monte-Carlo tails.
pub fn closed_form_suite(seed: u64, draws: usize) -> SuiteResult {
    timed("gaussian-cvar", || {
        let half = gaussian_cvar(0.0, 1.0, 0.5)?;
        let exact = -(2.0 / std::f64::consts::PI).sqrt();
        let mut ok = (half - exact).abs() <= 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let mu = rng.random_range(-5.0..5.0);
            let sigma = rng.random_range(0.1..3.0);
            let alpha = rng.random_range(0.05..0.95);
            let xs: Vec<f64> = (0..draws)
                .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mc = tail_mean(xs, alpha);
            let cf = gaussian_cvar(mu, sigma, alpha)?;
            // relative to the scale of the tail, so means near zero stay meaningful
            let rel = (cf - mc).abs() / cf.abs().max(sigma);
            worst = worst.max(rel);
        }
        ok &= worst < 0.01;
        Ok((ok, format!("CVaR_0.5(N(0,1)) = {half:.6}, worst relative MC gap {worst:.2e}")))
    })
}

/// Discounted tabular evaluation against the nested brute force at `h = 12`.
pub fn tabular_suite(seed: u64) -> SuiteResult {
    timed("tabular-dp-vs-bruteforce", || {
        let gamma: f64 = 0.5;
        let horizon = 12;
        let mut worst_excess = f64::NEG_INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..20 {
            let mdp = random_tabular_mdp(5, 2, 0.4, seed.wrapping_add(i))?.with_discount(gamma)?;
            let probs: Vec<f64> = (0..5)
                .flat_map(|_| {
                    let p: f64 = rng.random();
                    [p, 1.0 - p]
                })
                .collect();
            let policy = PolicyTable::new(5, 2, probs)?;
            let bound = gamma.powi(horizon as i32) * mdp.max_abs_reward() / (1.0 - gamma) + 1e-6;
            for spec in [RiskSpec::Neutral, RiskSpec::Cvar { alpha: 0.5 }, RiskSpec::Wang { eta: 0.5 }] {
                let dp = risk_policy_evaluation(&mdp, &policy, spec, 1e-12)?;
                let bf = dynamic_risk_bruteforce(&mdp, &policy, spec, horizon)?;
                let gap = (dp.values[mdp.initial_state()] - bf).abs();
                worst_excess = worst_excess.max(gap - bound);
            }
        }
        Ok((
            worst_excess <= 0.0,
            format!("60 comparisons, worst gap minus truncation bound {worst_excess:.2e}"),
        ))
    })
}

/// Successor variance and CVaR of a linear value under a large synthetic
/// ensemble with stratified members.
pub fn proposition_suite(seed: u64, draws: usize) -> SuiteResult {
    timed("successor-uncertainty", || {
        let (sa, se, k, alpha) = (0.7, 1.1, 2.0, 0.1);
        let spec = SyntheticGaussianSpec {
            mu0: 0.0,
            sigma_epistemic: se,
            sigma_aleatoric: sa,
            n_members: 200,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ens = build_stratified_ensemble(&spec)?;
        let values: Vec<f64> = ens
            .sample_successors(&[0.0], &[0.0], draws, &mut rng)?
            .iter()
            .map(|d| k * d.next_state[0])
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target_var = k * k * (sa * sa + se * se);
        let var_err = (var - target_var).abs() / target_var;
        let sd = k * (sa * sa + se * se as f64).sqrt();
        let z = normal::quantile(alpha);
        let formula = -sd / (alpha * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5 * z * z).exp();
        let mc = tail_mean(values, alpha);
        let cvar_err = (mc - formula).abs() / formula.abs();
        Ok((
            var_err < 0.05 && cvar_err < 0.03,
            format!(
                "var {var:.4} vs {target_var:.4} ({:.2}%), CVaR_0.1 {mc:.4} vs {formula:.4} ({:.2}%)",
                100.0 * var_err,
                100.0 * cvar_err
            ),
        ))
    })
}

/// All suites at their release sizes.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        envelope_suite(seed),
        closed_form_suite(seed, 1_000_000),
        tabular_suite(seed),
        proposition_suite(seed, 100_000),
    ]
}

pub fn format_table(results: &[SuiteResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:<6}  {:>8}  detail\n", "suite", "status", "seconds");
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{:<width$}  {status:<6}  {:>8.3}  {}", r.name, r.seconds, r.detail);
    }
    out
}
