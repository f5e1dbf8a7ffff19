//! Environments: the currency-exchange liquidation task, a one-step
//! illustrative MDP with an action-dependent noise spike, and a random
//! tabular MDP generator.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, TransitionRecord};
use crate::error::{invalid, Error, Result};
use crate::tabular::TabularMDP;

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// An episodic environment over flat real-valued states and actions in
/// `[-1, 1]^action_dim`.
pub trait Environment: Send + Sync {
    fn id(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step;
    /// Analytic terminal rule, also applied to model-predicted states.
    fn is_terminal(&self, state: &[f64]) -> bool;
    /// Upper bound on episode length.
    fn horizon(&self) -> usize;
}

/// Ornstein-Uhlenbeck exchange-rate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OUParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub p0_mean: f64,
    pub p0_std: f64,
    pub dt: f64,
}

impl Default for OUParams {
    fn default() -> Self {
        Self {
            theta: 0.05,
            mu: 1.5,
            sigma: 0.2,
            p0_mean: 1.0,
            p0_std: 0.05,
            dt: 1.0,
        }
    }
}

impl OUParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta", self.theta), ("sigma", self.sigma), ("p0_std", self.p0_std)] {
            if !(v >= 0.0) {
                return Err(invalid(name, v, "must be non-negative"));
            }
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt", self.dt, "must be positive"));
        }
        Ok(())
    }

    /// Euler-Maruyama step, floored at zero.
    pub fn next_rate<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> f64 {
        let eps: f64 = rng.sample(StandardNormal);
        (p + self.theta * (self.mu - p) * self.dt + self.sigma * self.dt.sqrt() * eps).max(0.0)
    }

    /// Standard deviation of the stationary distribution.
    pub fn stationary_std(&self) -> f64 {
        self.sigma / (2.0 * self.theta).sqrt()
    }
}

/// `(t, m, p)`: timestep, currency A remaining, exchange rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrencyState {
    pub t: usize,
    pub m: f64,
    pub p: f64,
}

impl CurrencyState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.t as f64, self.m, self.p]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            t: s[0].round().max(0.0) as usize,
            m: s[1],
            p: s[2],
        }
    }
}

/// Liquidate a fixed amount of currency A into B before a deadline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurrencyEnv {
    pub ou: OUParams,
    /// Deadline `T`; unconverted currency is forfeited.
    pub horizon: usize,
    pub initial_amount: f64,
}

impl Default for CurrencyEnv {
    fn default() -> Self {
        Self {
            ou: OUParams::default(),
            horizon: 50,
            initial_amount: 100.0,
        }
    }
}

pub const CURRENCY_ID: &str = "currency";
pub const ILLUSTRATIVE_ID: &str = "illustrative";

impl CurrencyEnv {
    pub fn validate(&self) -> Result<()> {
        self.ou.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("currency horizon must be at least 1".into()));
        }
        if !(self.initial_amount > 0.0) {
            return Err(invalid("initial_amount", self.initial_amount, "must be positive"));
        }
        Ok(())
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> CurrencyState {
        let z: f64 = rng.sample(StandardNormal);
        CurrencyState {
            t: 0,
            m: self.initial_amount,
            p: (self.ou.p0_mean + self.ou.p0_std * z).max(0.0),
        }
    }
}

/// Converts `max(action, 0)·m` at the current rate, then advances the rate.
/// Actions outside `[-1, 1]` are clipped.
pub fn currency_step<R: Rng + ?Sized>(
    state: &CurrencyState,
    action: f64,
    env: &CurrencyEnv,
    rng: &mut R,
) -> (CurrencyState, f64, bool) {
    let a = if (-1.0..=1.0).contains(&action) {
        action
    } else {
        log::warn!("currency action {action} clipped to [-1, 1]");
        if action.is_nan() {
            -1.0
        } else {
            action.clamp(-1.0, 1.0)
        }
    };
    let converted = a.max(0.0) * state.m;
    let reward = converted * state.p;
    let next = CurrencyState {
        t: state.t + 1,
        m: state.m - converted,
        p: env.ou.next_rate(state.p, rng),
    };
    (next, reward, next.t >= env.horizon)
}

/// Converts a uniform proportion in `(0, 1]` with probability 0.2 and
/// nothing (action `-1`) otherwise.
pub fn currency_behavior_policy<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random_bool(0.2) {
        1.0 - rng.random::<f64>()
    } else {
        -1.0
    }
}

impl Environment for CurrencyEnv {
    fn id(&self) -> &str {
        CURRENCY_ID
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.initial_state(rng).to_vec()
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let (next, reward, terminal) = currency_step(&CurrencyState::from_slice(state), action[0], self, rng);
        Step {
            next_state: next.to_vec(),
            reward,
            terminal,
        }
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        state[0] >= self.horizon as f64 - 0.5
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Behaviour-policy episodes flattened into a dataset. Episode `i` uses its
/// own ChaCha stream, so the result does not depend on scheduling.
pub fn generate_currency_dataset(n_episodes: usize, env: &CurrencyEnv, seed: u64) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    env.validate()?;
    let mut records = Vec::with_capacity(n_episodes * env.horizon);
    for ep in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ep as u64);
        let mut state = env.initial_state(&mut rng);
        loop {
            let a = currency_behavior_policy(&mut rng);
            let (next, reward, terminal) = currency_step(&state, a, env, &mut rng);
            records.push(TransitionRecord {
                state: state.to_vec(),
                action: vec![a],
                reward,
                next_state: next.to_vec(),
                terminal,
            });
            if terminal {
                break;
            }
            state = next;
        }
    }
    Ok(OfflineDataset::new(records, 3, 1)?.with_origin(CURRENCY_ID, seed))
}

/// One-step MDP from a constant state: `s' ~ N(mean(a), noise(a)²)` and
/// reward `s'`, with
/// `mean(a) = mean_offset + mean_amplitude·sin(mean_frequency·a)` and
/// `noise(a) = noise_floor + spike_height·exp(−((a − spike_center)/spike_width)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IllustrativeEnvSpec {
    pub mean_offset: f64,
    pub mean_amplitude: f64,
    pub mean_frequency: f64,
    pub noise_floor: f64,
    pub spike_height: f64,
    pub spike_center: f64,
    pub spike_width: f64,
    /// Behaviour actions are uniform on this interval.
    pub data_action_range: (f64, f64),
    pub dataset_size: usize,
}

impl Default for IllustrativeEnvSpec {
    fn default() -> Self {
        Self {
            mean_offset: 0.25,
            mean_amplitude: 0.4,
            mean_frequency: 2.2,
            noise_floor: 0.05,
            spike_height: 0.5,
            spike_center: 0.4,
            spike_width: 0.15,
            data_action_range: (-0.85, 0.6),
            dataset_size: 2000,
        }
    }
}

impl IllustrativeEnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_floor >= 0.0 && self.spike_height >= 0.0) {
            return Err(Error::Config("illustrative noise must be non-negative".into()));
        }
        if !(self.spike_width > 0.0) {
            return Err(invalid("spike_width", self.spike_width, "must be positive"));
        }
        let (lo, hi) = self.data_action_range;
        if !(lo < hi && lo >= -1.0 && hi <= 1.0) {
            return Err(Error::Config(format!("data action range ({lo}, {hi}) must lie in [-1, 1]")));
        }
        Ok(())
    }

    pub fn mean(&self, a: f64) -> f64 {
        self.mean_offset + self.mean_amplitude * (self.mean_frequency * a).sin()
    }

    pub fn noise(&self, a: f64) -> f64 {
        let z = (a - self.spike_center) / self.spike_width;
        self.noise_floor + self.spike_height * (-z * z).exp()
    }

    pub fn in_data_range(&self, a: f64) -> bool {
        (self.data_action_range.0..=self.data_action_range.1).contains(&a)
    }
}

/// Returns `(s', reward)` with `reward = s'`.
pub fn illustrative_sample<R: Rng + ?Sized>(spec: &IllustrativeEnvSpec, action: f64, rng: &mut R) -> (f64, f64) {
    let z: f64 = rng.sample(StandardNormal);
    let s = spec.mean(action) + spec.noise(action) * z;
    (s, s)
}

/// `spec.dataset_size` terminal one-step transitions from state `[0]`.
pub fn generate_illustrative_dataset(spec: &IllustrativeEnvSpec, seed: u64) -> Result<OfflineDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.data_action_range;
    let records = (0..spec.dataset_size)
        .map(|_| {
            let a = rng.random_range(lo..hi);
            let (s, r) = illustrative_sample(spec, a, &mut rng);
            TransitionRecord {
                state: vec![0.0],
                action: vec![a],
                reward: r,
                next_state: vec![s],
                terminal: true,
            }
        })
        .collect();
    Ok(OfflineDataset::new(records, 1, 1)?.with_origin(ILLUSTRATIVE_ID, seed))
}

impl Environment for IllustrativeEnvSpec {
    fn id(&self) -> &str {
        ILLUSTRATIVE_ID
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&self, _state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let (s, r) = illustrative_sample(self, action[0].clamp(-1.0, 1.0), rng);
        Step {
            next_state: vec![s],
            reward: r,
            terminal: true,
        }
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        true
    }

    fn horizon(&self) -> usize {
        1
    }
}

/// Discount used by [`random_tabular_mdp`].
pub const RANDOM_MDP_DISCOUNT: f64 = 0.9;

/// Random MDP with Dirichlet(1) rows over a random support and Uniform(0,1)
/// rewards. Each row keeps `max(1, round((1 − sparsity)·n_states))` nonzero
/// entries, so `sparsity = 1` gives deterministic transitions.
pub fn random_tabular_mdp(n_states: usize, n_actions: usize, sparsity: f64, seed: u64) -> Result<TabularMDP> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(invalid("sparsity", sparsity, "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = (((1.0 - sparsity) * n_states as f64).round() as usize).clamp(1, n_states.max(1));
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut idx: Vec<usize> = (0..n_states).collect();
    for row in transition.chunks_mut(n_states.max(1)) {
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..support).map(|_| rng.sample::<f64, _>(Exp1) + 1e-300).collect();
        let total: f64 = draws.iter().sum();
        for (&j, d) in idx.iter().zip(&draws) {
            row[j] = d / total;
        }
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    TabularMDP::new(n_states, n_actions, transition, reward, 0, RANDOM_MDP_DISCOUNT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn currency_step_examples() {
        let env = CurrencyEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = CurrencyState { t: 3, m: 40.0, p: 1.1 };
        let (n, r, done) = currency_step(&s, -0.5, &env, &mut rng);
        assert_eq!((r, n.m, n.t, done), (0.0, 40.0, 4, false));
        let s = CurrencyState { t: 0, m: 100.0, p: 1.2 };
        let (n, r, _) = currency_step(&s, 1.0, &env, &mut rng);
        assert!((r - 120.0).abs() < 1e-12);
        assert_eq!(n.m, 0.0);
        let still = CurrencyEnv {
            ou: OUParams { sigma: 0.0, ..OUParams::default() },
            ..CurrencyEnv::default()
        };
        let s = CurrencyState { t: 0, m: 1.0, p: 1.5 };
        assert_eq!(currency_step(&s, 0.0, &still, &mut rng).0.p, 1.5);
        let s = CurrencyState { t: 49, m: 1.0, p: 1.5 };
        assert!(currency_step(&s, 0.0, &env, &mut rng).2);
        // out-of-box actions are clipped
        let s = CurrencyState { t: 0, m: 10.0, p: 2.0 };
        assert_eq!(currency_step(&s, 3.0, &env, &mut rng).1, 20.0);
    }

    #[test]
    fn ou_stationary_moments() {
        let ou = OUParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sd = ou.stationary_std();
        let z: f64 = rng.sample(StandardNormal);
        let mut p = ou.mu + sd * z;
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            p = ou.next_rate(p, &mut rng);
            sum += p;
            sq += p * p;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((mean - 1.5).abs() < 0.05 * 1.5, "mean {mean}");
        // discrete-time Euler variance σ²/(2θ − θ²) differs from the SDE's by 2.5%
        assert!((std - 0.632).abs() < 0.05 * 0.632, "std {std}");
    }

    #[test]
    fn behaviour_policy_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let acts: Vec<f64> = (0..n).map(|_| currency_behavior_policy(&mut rng)).collect();
        assert!(acts.iter().all(|a| (-1.0..=1.0).contains(a)));
        let conv: Vec<f64> = acts.iter().copied().filter(|&a| a > 0.0).collect();
        let freq = conv.len() as f64 / n as f64;
        assert!((freq - 0.2).abs() < 0.004, "freq {freq}");
        let mean = conv.iter().sum::<f64>() / conv.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(acts.iter().all(|&a| a == -1.0 || a > 0.0));
    }

    #[test]
    fn dataset_structure_and_conservation() {
        let env = CurrencyEnv::default();
        let data = generate_currency_dataset(40, &env, 7).unwrap();
        assert_eq!(data.len(), 40 * 50);
        let again = generate_currency_dataset(40, &env, 7).unwrap();
        assert_eq!(data, again);
        let mut convert_at = vec![false; 50];
        let mut hold_at = vec![false; 50];
        for ep in data.records().chunks(50) {
            assert!(ep[..49].iter().all(|r| !r.terminal) && ep[49].terminal);
            let mut converted = 0.0;
            let mut paid = 0.0;
            let mut max_p: f64 = 0.0;
            for (t, r) in ep.iter().enumerate() {
                assert_eq!(r.state[0], t as f64);
                assert!(r.reward >= 0.0);
                assert!(r.next_state[1] <= r.state[1]);
                let c = r.state[1] - r.next_state[1];
                converted += c;
                paid += c * r.state[2];
                max_p = max_p.max(r.state[2]);
                if r.action[0] > 0.0 {
                    convert_at[t] = true;
                } else {
                    hold_at[t] = true;
                }
            }
            let total: f64 = ep.iter().map(|r| r.reward).sum();
            assert!((total - paid).abs() < 1e-9);
            assert!(converted <= 100.0 + 1e-9);
            assert!(total <= 100.0 * max_p + 1e-9);
        }
        let buckets = 5;
        for b in 0..buckets {
            let range = b * 10..(b + 1) * 10;
            assert!(range.clone().any(|t| convert_at[t]) && range.clone().any(|t| hold_at[t]));
        }
    }

    #[test]
    fn illustrative_examples() {
        let spec = IllustrativeEnvSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flat = IllustrativeEnvSpec {
            noise_floor: 0.0,
            spike_height: 0.0,
            ..spec.clone()
        };
        let (s, r) = illustrative_sample(&flat, 0.3, &mut rng);
        assert_eq!(s, flat.mean(0.3));
        assert_eq!(s, r);
        let std_at = |a: f64, rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..10_000).map(|_| illustrative_sample(&spec, a, rng).0).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        assert!(std_at(0.4, &mut rng) >= 3.0 * std_at(-0.35, &mut rng));
        let data = generate_illustrative_dataset(&spec, 1).unwrap();
        assert_eq!(data.len(), spec.dataset_size);
        for r in data.records() {
            assert!(spec.in_data_range(r.action[0]));
            assert_eq!(r.reward, r.next_state[0]);
            assert!(r.terminal);
        }
    }

    #[test]
    fn random_mdp_properties() {
        let a = random_tabular_mdp(6, 3, 0.3, 11).unwrap();
        assert_eq!(a, random_tabular_mdp(6, 3, 0.3, 11).unwrap());
        assert_ne!(a, random_tabular_mdp(6, 3, 0.3, 12).unwrap());
        for s in 0..6 {
            for act in 0..3 {
                let row = a.transition_row(s, act);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&a.reward(s, act)));
            }
        }
        let det = random_tabular_mdp(5, 2, 1.0, 4).unwrap();
        for s in 0..5 {
            for act in 0..2 {
                assert_eq!(det.transition_row(s, act).iter().filter(|&&p| p > 0.0).count(), 1);
            }
        }
        assert!(random_tabular_mdp(3, 1, 1.5, 0).is_err());
    }
}
