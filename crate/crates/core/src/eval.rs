//! Policy evaluation, static-risk metrics and report files.
//!
//! A report is a single JSON object:
//!
//! ```text
//! { "episodes": N, "seed": u64, "alpha": f64, "config_digest": hex,
//!   "mean": f64, "cvar": f64, "normalized_mean": f64, "normalized_cvar": f64,
//!   "anchors": { "random_score": f64, "expert_score": f64 },
//!   "histogram": { "low": f64, "high": f64, "counts": [40 × u64] },
//!   "returns": [N × f64] }
//! ```
//!
//! A companion CSV (`episode,return`) sits next to it with extension `.csv`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::stack_rows;
use crate::risk::static_cvar_of_samples;
use crate::sac::Agent;

pub const HISTOGRAM_BINS: usize = 40;

/// Raw scores mapped to 0 and 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationAnchors {
    pub random_score: f64,
    pub expert_score: f64,
}

pub const CURRENCY_ANCHORS: NormalizationAnchors = NormalizationAnchors {
    random_score: 0.0,
    expert_score: 135.0,
};

/// `100·(raw − random)/(expert − random)`.
pub fn normalize_score(raw: f64, anchors: NormalizationAnchors) -> Result<f64> {
    let span = anchors.expert_score - anchors.random_score;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::InvalidParameter {
            name: "expert_score",
            value: anchors.expert_score,
            reason: "must differ from random_score",
        });
    }
    Ok(100.0 * (raw - anchors.random_score) / span)
}

/// Deterministic action choice for a batch of states.
pub trait GreedyPolicy {
    fn act(&self, states: &Array2<f64>) -> Result<Array2<f64>>;
}

impl GreedyPolicy for Agent {
    fn act(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        self.greedy_actions(states)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]` of `xs`; the last bin is closed.
    pub fn build(xs: &[f64], bins: usize) -> Self {
        let low = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let high = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; bins];
        let width = (high - low) / bins as f64;
        for &x in xs {
            let b = if width > 0.0 {
                (((x - low) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { low, high, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub alpha: f64,
    pub config_digest: String,
    pub mean: f64,
    pub cvar: f64,
    pub normalized_mean: f64,
    pub normalized_cvar: f64,
    pub anchors: NormalizationAnchors,
    pub histogram: Histogram,
    pub returns: Vec<f64>,
}

impl EvalReport {
    pub fn from_returns(
        returns: Vec<f64>,
        alpha: f64,
        anchors: NormalizationAnchors,
        seed: u64,
        config_digest: &str,
    ) -> Result<Self> {
        if returns.is_empty() {
            return Err(Error::InsufficientData("report needs at least one episode".into()));
        }
        let mut sorted = returns.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        // sorted input makes the tail sum independent of episode order;
        // clamp guards against rounding at α = 1
        let cvar = static_cvar_of_samples(&sorted, alpha)?.min(mean);
        Ok(Self {
            episodes: returns.len(),
            seed,
            alpha,
            config_digest: config_digest.to_string(),
            mean,
            cvar,
            normalized_mean: normalize_score(mean, anchors)?,
            normalized_cvar: normalize_score(cvar, anchors)?,
            anchors,
            histogram: Histogram::build(&returns, HISTOGRAM_BINS),
            returns,
        })
    }
}

/// Returns of `n_episodes` greedy episodes, run in lockstep; episode `i`
/// draws environment noise from ChaCha stream `i` of `seed`.
pub fn run_episodes(env: &dyn Environment, policy: &dyn GreedyPolicy, n_episodes: usize, seed: u64) -> Result<Vec<f64>> {
    if n_episodes == 0 {
        return Err(Error::InsufficientData("need at least one evaluation episode".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n_episodes)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut states: Vec<Vec<f64>> = rngs.iter_mut().map(|r| env.reset(r)).collect();
    let mut returns = vec![0.0; n_episodes];
    let mut active: Vec<usize> = (0..n_episodes).collect();
    let sd = env.state_dim();
    for _ in 0..env.horizon() {
        if active.is_empty() {
            break;
        }
        let rows: Vec<&[f64]> = active.iter().map(|&i| states[i].as_slice()).collect();
        let actions = policy.act(&stack_rows(&rows, sd))?;
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let step = env.step(&states[i], actions.row(row).as_slice().unwrap_or(&[]), &mut rngs[i]);
            returns[i] += step.reward;
            states[i] = step.next_state;
            if !step.terminal {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(returns)
}

/// Greedy evaluation of `policy` summarised as a report.
pub fn evaluate_policy(
    env: &dyn Environment,
    policy: &dyn GreedyPolicy,
    n_episodes: usize,
    alpha: f64,
    anchors: NormalizationAnchors,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    let returns = run_episodes(env, policy, n_episodes, seed)?;
    EvalReport::from_returns(returns, alpha, anchors, seed, config_digest)
}

/// Mean over checkpoints of each checkpoint's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub checkpoints: usize,
    pub mean: f64,
    pub cvar: f64,
    pub normalized_mean: f64,
    pub normalized_cvar: f64,
}

/// CVaR is computed per checkpoint, then averaged.
pub fn aggregate_reports(reports: &[EvalReport]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(Error::InsufficientData("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(AggregateMetrics {
        checkpoints: reports.len(),
        mean: avg(|r| r.mean),
        cvar: avg(|r| r.cvar),
        normalized_mean: avg(|r| r.normalized_mean),
        normalized_cvar: avg(|r| r.normalized_cvar),
    })
}

/// Writes the JSON report at `path` and the returns CSV next to it.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    if report.episodes == 0 || report.returns.is_empty() {
        return Err(Error::InsufficientData("refusing to write a report with zero episodes".into()));
    }
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    let mut csv = String::from("episode,return\n");
    for (i, r) in report.returns.iter().enumerate() {
        csv.push_str(&format!("{i},{r:?}\n"));
    }
    fs::write(path.with_extension("csv"), csv)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
