//! Synthetic rollouts under adversarially perturbed successor sampling.
//!
//! Each step branches from the current states, asks the model for `m`
//! candidate successors per state, scores them with the critic, perturbs the
//! uniform candidate distribution with the configured risk measure and draws
//! one candidate from the perturbed weights.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, TransitionRecord};
use crate::dynamics::GaussianEnsemble;
use crate::error::{Error, Result};
use crate::nn::stack_rows;
use crate::risk::{perturb, DiscreteDistribution, RiskSpec};
use crate::sac::Agent;

/// How candidates are ranked before perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// `V(s')` only.
    #[default]
    Value,
    /// `r + γ·V(s')`.
    RewardPlusValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Rollout length.
    pub k: usize,
    /// Candidate successors per step.
    pub m: usize,
    pub n_rollouts: usize,
    pub risk: RiskSpec,
    pub rank_by: RankBy,
    /// Discount used only by [`RankBy::RewardPlusValue`].
    pub discount: f64,
    /// Buffer holds `n_rollouts · k · retain_iterations` transitions.
    pub retain_iterations: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k: 1,
            m: 10,
            n_rollouts: 1000,
            risk: RiskSpec::Cvar { alpha: 0.5 },
            rank_by: RankBy::Value,
            discount: 0.99,
            retain_iterations: 5,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.n_rollouts == 0 || self.retain_iterations == 0 {
            return Err(Error::Config("rollout k, m, n_rollouts and retain_iterations must be >= 1".into()));
        }
        self.risk.validate()
    }

    pub fn buffer_capacity(&self) -> usize {
        self.n_rollouts * self.k * self.retain_iterations
    }
}

/// Something that proposes actions for a batch of states.
pub trait ActionSampler {
    fn sample_actions(&self, states: &Array2<f64>, rng: &mut dyn rand::RngCore) -> Result<Array2<f64>>;
}

/// Something that scores a batch of states.
pub trait ValueCritic {
    fn values(&self, states: &Array2<f64>, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
}

impl ActionSampler for Agent {
    fn sample_actions(&self, states: &Array2<f64>, rng: &mut dyn rand::RngCore) -> Result<Array2<f64>> {
        self.select_actions(states, false, rng)
    }
}

impl ValueCritic for Agent {
    fn values(&self, states: &Array2<f64>, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        self.value_estimates(states, rng)
    }
}

/// Bounded FIFO of synthetic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBuffer {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
    inserted: u64,
}

impl SyntheticBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.capacity == 0 {
            return;
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total insertions ever made, including evicted records.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> Option<&TransitionRecord> {
        self.records.get(i)
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    pub fn restore(records: Vec<TransitionRecord>, capacity: usize, inserted: u64) -> Result<Self> {
        if records.len() > capacity {
            return Err(Error::Format(format!(
                "buffer holds {} records but capacity is {capacity}",
                records.len()
            )));
        }
        Ok(Self {
            records: records.into(),
            capacity,
            inserted,
        })
    }
}

/// Per-call summary, logged as one JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub transitions: usize,
    pub mean_chosen_value: f64,
    pub min_chosen_value: f64,
    pub mean_candidate_value: f64,
    pub mean_chosen_reward: f64,
    pub early_termination_rate: f64,
    pub buffer_len: usize,
    pub buffer_capacity: usize,
    /// `rank_histogram[r]` counts choices of the `r`-th lowest-scored candidate.
    pub rank_histogram: Vec<usize>,
}

/// Draws an index from `probs` by inverse CDF.
fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Generates `cfg.n_rollouts` rollouts of at most `cfg.k` steps in lockstep
/// and appends them to `buffer`, step-major: all first-step transitions
/// precede all second-step ones.
#[allow(clippy::too_many_arguments)]
pub fn generate_rollouts<R: Rng>(
    ensemble: &GaussianEnsemble,
    dataset: &OfflineDataset,
    policy: &dyn ActionSampler,
    critic: &dyn ValueCritic,
    is_terminal: &dyn Fn(&[f64]) -> bool,
    cfg: &RolloutConfig,
    buffer: &mut SyntheticBuffer,
    rng: &mut R,
) -> Result<RolloutStats> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("cannot branch rollouts from an empty dataset".into()));
    }
    let sd = dataset.state_dim();
    let m = cfg.m;
    let mut states: Vec<Vec<f64>> = (0..cfg.n_rollouts)
        .map(|_| dataset.records()[rng.random_range(0..dataset.len())].state.clone())
        .collect();
    let mut ranks = vec![0usize; m];
    let (mut n, mut sum_v, mut min_v, mut sum_cand, mut sum_r, mut n_term) = (0usize, 0.0, f64::INFINITY, 0.0, 0.0, 0usize);
    for _step in 0..cfg.k {
        if states.is_empty() {
            break;
        }
        let s_mat = stack_rows(&states, sd);
        let actions = policy.sample_actions(&s_mat, rng)?;
        let draws = ensemble.sample_successors_batch(&s_mat, &actions, m, rng)?;
        let cand_states: Vec<&[f64]> = draws.iter().flatten().map(|d| d.next_state.as_slice()).collect();
        let values = critic.values(&stack_rows(&cand_states, sd), rng)?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "critic value {} for candidate state {:?}",
                values[bad], cand_states[bad]
            )));
        }
        let mut next_states = Vec::with_capacity(states.len());
        for (i, cands) in draws.iter().enumerate() {
            let mut scores = Vec::with_capacity(m);
            let mut cand_values = Vec::with_capacity(m);
            for (j, c) in cands.iter().enumerate() {
                let v = if is_terminal(&c.next_state) { 0.0 } else { values[i * m + j] };
                cand_values.push(v);
                scores.push(match cfg.rank_by {
                    RankBy::Value => v,
                    RankBy::RewardPlusValue => c.reward + cfg.discount * v,
                });
            }
            let dist = DiscreteDistribution::uniform_with_payloads(scores.clone(), (0..m).collect())?;
            let weights = perturb(&dist, cfg.risk)?;
            let pick = sample_index(weights.probabilities(), rng);
            let rank = scores
                .iter()
                .enumerate()
                .filter(|&(j, &sc)| sc < scores[pick] || (sc == scores[pick] && j < pick))
                .count();
            ranks[rank] += 1;
            let chosen = &cands[pick];
            let terminal = is_terminal(&chosen.next_state);
            n += 1;
            sum_v += cand_values[pick];
            min_v = min_v.min(cand_values[pick]);
            sum_cand += cand_values.iter().sum::<f64>() / m as f64;
            sum_r += chosen.reward;
            buffer.push(TransitionRecord {
                state: states[i].clone(),
                action: actions.row(i).to_vec(),
                reward: chosen.reward,
                next_state: chosen.next_state.clone(),
                terminal,
            });
            if terminal {
                n_term += 1;
            } else {
                next_states.push(chosen.next_state.clone());
            }
        }
        states = next_states;
    }
    let nf = n.max(1) as f64;
    Ok(RolloutStats {
        transitions: n,
        mean_chosen_value: sum_v / nf,
        min_chosen_value: if n == 0 { 0.0 } else { min_v },
        mean_candidate_value: sum_cand / nf,
        mean_chosen_reward: sum_r / nf,
        early_termination_rate: n_term as f64 / cfg.n_rollouts as f64,
        buffer_len: buffer.len(),
        buffer_capacity: buffer.capacity(),
        rank_histogram: ranks,
    })
}

/// `batch_size` i.i.d. records, each real with probability `f` and synthetic
/// otherwise. An empty buffer falls back to all-real with a warning.
pub fn mixed_batch<'a, R: Rng + ?Sized>(
    dataset: &'a OfflineDataset,
    buffer: &'a SyntheticBuffer,
    batch_size: usize,
    f: f64,
    rng: &mut R,
) -> Result<Vec<&'a TransitionRecord>> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("mixed batch needs a non-empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidParameter {
            name: "real_fraction",
            value: f,
            reason: "must lie in [0, 1]",
        });
    }
    let real = dataset.records();
    if buffer.is_empty() {
        if f < 1.0 {
            log::warn!("synthetic buffer is empty; drawing an all-real batch");
        }
        return Ok((0..batch_size).map(|_| &real[rng.random_range(0..real.len())]).collect());
    }
    Ok((0..batch_size)
        .map(|_| {
            if rng.random_bool(f) {
                &real[rng.random_range(0..real.len())]
            } else {
                &buffer.records[rng.random_range(0..buffer.len())]
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalizer;
    use crate::dynamics::{build_synthetic_ensemble, constant_member, SyntheticGaussianSpec};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ZeroPolicy;
    impl ActionSampler for ZeroPolicy {
        fn sample_actions(&self, states: &Array2<f64>, _rng: &mut dyn RngCore) -> Result<Array2<f64>> {
            Ok(Array2::zeros((states.nrows(), 1)))
        }
    }

    /// `V(s) = scale · s[0]`.
    struct LinearCritic(f64);
    impl ValueCritic for LinearCritic {
        fn values(&self, states: &Array2<f64>, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
            Ok(states.column(0).iter().map(|s| self.0 * s).collect())
        }
    }

    struct NanCritic;
    impl ValueCritic for NanCritic {
        fn values(&self, states: &Array2<f64>, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN; states.nrows()])
        }
    }

    fn world(seed: u64) -> (GaussianEnsemble, OfflineDataset) {
        let spec = SyntheticGaussianSpec {
            mu0: 0.0,
            sigma_epistemic: 1.0,
            sigma_aleatoric: 0.5,
            n_members: 7,
        };
        let ens = build_synthetic_ensemble(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let records = (0..50)
            .map(|i| TransitionRecord {
                state: vec![i as f64 / 10.0],
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0],
                terminal: false,
            })
            .collect();
        (ens, OfflineDataset::new(records, 1, 1).unwrap())
    }

    fn never(_: &[f64]) -> bool {
        false
    }

    fn run(risk: RiskSpec, critic: &dyn ValueCritic, n: usize, seed: u64) -> (RolloutStats, SyntheticBuffer) {
        let (ens, data) = world(1);
        let cfg = RolloutConfig {
            n_rollouts: n,
            risk,
            ..RolloutConfig::default()
        };
        let mut buf = SyntheticBuffer::new(cfg.buffer_capacity());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = generate_rollouts(&ens, &data, &ZeroPolicy, critic, &never, &cfg, &mut buf, &mut rng).unwrap();
        (stats, buf)
    }

    fn assert_uniform_ranks(hist: &[usize], total: usize) {
        let p = 1.0 / hist.len() as f64;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for &c in hist {
            assert!((c as f64 - total as f64 * p).abs() < 3.0 * sigma + 1.0, "{hist:?}");
        }
    }

    #[test]
    fn neutral_picks_uniform_ranks() {
        let (stats, _) = run(RiskSpec::Neutral, &LinearCritic(1.0), 10_000, 2);
        assert_eq!(stats.transitions, 10_000);
        assert_uniform_ranks(&stats.rank_histogram, 10_000);
    }

    #[test]
    fn cvar_tenth_always_picks_worst() {
        let (stats, _) = run(RiskSpec::Cvar { alpha: 0.1 }, &LinearCritic(1.0), 2000, 3);
        assert_eq!(stats.rank_histogram[0], 2000);
    }

    #[test]
    fn constant_critic_is_uniform_for_every_spec() {
        for risk in [RiskSpec::Cvar { alpha: 0.1 }, RiskSpec::Wang { eta: 10.0 }, RiskSpec::Neutral] {
            let (stats, _) = run(risk, &LinearCritic(0.0), 10_000, 4);
            assert_uniform_ranks(&stats.rank_histogram, 10_000);
        }
    }

    #[test]
    fn pessimism_orders_chosen_values() {
        let chosen = |risk| run(risk, &LinearCritic(1.0), 5000, 5).0.mean_chosen_value;
        let c01 = chosen(RiskSpec::Cvar { alpha: 0.1 });
        let c05 = chosen(RiskSpec::Cvar { alpha: 0.5 });
        let c10 = chosen(RiskSpec::Cvar { alpha: 1.0 });
        let neutral = chosen(RiskSpec::Neutral);
        assert!(c01 <= c05 && c05 <= c10, "{c01} {c05} {c10}");
        assert!(c05 < neutral);
        assert_eq!(c10, neutral);
        // an optimistic pick of the best candidate on the same stream
        let (ens, data) = world(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut best = 0.0;
        for _ in 0..5000 {
            let s = data.records()[rng.random_range(0..data.len())].state.clone();
            let draws = ens.sample_successors(&s, &[0.0], 10, &mut rng).unwrap();
            best += draws.iter().map(|d| d.next_state[0]).fold(f64::MIN, f64::max);
        }
        assert!(neutral < best / 5000.0);
    }

    #[test]
    fn branches_start_from_dataset_and_respect_terminals() {
        let (ens, data) = world(2);
        let cfg = RolloutConfig {
            k: 3,
            n_rollouts: 200,
            risk: RiskSpec::Neutral,
            ..RolloutConfig::default()
        };
        let mut buf = SyntheticBuffer::new(cfg.buffer_capacity());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stop = |s: &[f64]| s[0] > 1.0;
        let stats = generate_rollouts(&ens, &data, &ZeroPolicy, &LinearCritic(1.0), &stop, &cfg, &mut buf, &mut rng)
            .unwrap();
        for r in buf.iter().take(200) {
            assert!(data.records().iter().any(|d| d.state == r.state));
        }
        assert!(stats.transitions < 600 && stats.transitions > 200);
        assert!(stats.early_termination_rate > 0.0);
        for r in buf.iter() {
            assert_eq!(r.terminal, r.next_state[0] > 1.0);
        }
    }

    #[test]
    fn same_seed_same_buffer() {
        let a = run(RiskSpec::Wang { eta: 0.75 }, &LinearCritic(1.0), 300, 7).1;
        let b = run(RiskSpec::Wang { eta: 0.75 }, &LinearCritic(1.0), 300, 7).1;
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_values_abort() {
        let (ens, data) = world(3);
        let cfg = RolloutConfig::default();
        let mut buf = SyntheticBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = generate_rollouts(&ens, &data, &ZeroPolicy, &NanCritic, &never, &cfg, &mut buf, &mut rng);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn reward_plus_value_ranking() {
        // two members: high successor with low reward, low successor with high reward
        let members = vec![
            constant_member(&[1.0], -5.0, &[0.0], 0.0, 1).unwrap(),
            constant_member(&[0.0], 5.0, &[0.0], 0.0, 1).unwrap(),
        ];
        let ens = GaussianEnsemble::new(members, vec![0, 1], 1, 1, false, Normalizer::identity(2), Normalizer::identity(2))
            .unwrap();
        let (_, data) = world(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut reward_of = |rank_by| {
            let cfg = RolloutConfig {
                n_rollouts: 500,
                risk: RiskSpec::Cvar { alpha: 0.1 },
                rank_by,
                ..RolloutConfig::default()
            };
            let mut buf = SyntheticBuffer::new(cfg.buffer_capacity());
            generate_rollouts(&ens, &data, &ZeroPolicy, &LinearCritic(1.0), &never, &cfg, &mut buf, &mut rng)
                .unwrap()
                .mean_chosen_reward
        };
        assert_eq!(reward_of(RankBy::Value), 5.0);
        assert_eq!(reward_of(RankBy::RewardPlusValue), -5.0);
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let mut buf = SyntheticBuffer::new(3);
        for i in 0..5 {
            buf.push(TransitionRecord {
                state: vec![i as f64],
                action: vec![],
                reward: 0.0,
                next_state: vec![0.0],
                terminal: false,
            });
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.inserted(), 5);
        let firsts: Vec<f64> = buf.iter().map(|r| r.state[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn mixed_batch_fractions() {
        let (_, data) = world(5);
        let mut buf = SyntheticBuffer::new(100);
        for _ in 0..100 {
            buf.push(TransitionRecord {
                state: vec![-7.0],
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0],
                terminal: false,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let real_frac = |f: f64, rng: &mut ChaCha8Rng| {
            let b = mixed_batch(&data, &buf, 10_000, f, rng).unwrap();
            b.iter().filter(|r| r.state[0] != -7.0).count() as f64 / 10_000.0
        };
        assert_eq!(real_frac(1.0, &mut rng), 1.0);
        assert_eq!(real_frac(0.0, &mut rng), 0.0);
        assert!((real_frac(0.5, &mut rng) - 0.5).abs() < 0.02);
        let empty = SyntheticBuffer::new(10);
        let b = mixed_batch(&data, &empty, 50, 0.0, &mut rng).unwrap();
        assert_eq!(b.len(), 50);
        assert!(mixed_batch(&data, &buf, 5, 1.5, &mut rng).is_err());
        let none = OfflineDataset::new(vec![], 1, 1).unwrap();
        assert!(mixed_batch(&none, &buf, 5, 0.5, &mut rng).is_err());
    }
}
