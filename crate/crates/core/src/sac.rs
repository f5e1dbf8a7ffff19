//! Soft actor-critic with twin critics, a tanh-squashed Gaussian policy and
//! automatic entropy tuning.
//!
//! Observations are standardised with a fixed [`Normalizer`] before entering
//! any network. Rewards are multiplied by `reward_scale` inside the critic
//! target; [`Agent::value_estimate`] reports values in unscaled units.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Normalizer, TransitionRecord};
use crate::error::{Error, Result};
use crate::nn::{join_floats, parse_floats, stack_rows, Activation, Adam, Gradients, Mlp};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub alpha_lr: f64,
    pub discount: f64,
    pub tau: f64,
    /// Defaults to `-action_dim` when absent.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub initial_temperature: f64,
    pub reward_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            critic_lr: 3e-4,
            actor_lr: 1e-4,
            alpha_lr: 3e-4,
            discount: 0.99,
            tau: 5e-3,
            target_entropy: None,
            batch_size: 256,
            hidden_layers: 2,
            hidden_width: 64,
            initial_temperature: 0.1,
            reward_scale: 0.01,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("critic_lr", self.critic_lr),
            ("actor_lr", self.actor_lr),
            ("alpha_lr", self.alpha_lr),
            ("initial_temperature", self.initial_temperature),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("agent.{name} = {v} must be a non-negative number")));
            }
        }
        if !(self.initial_temperature > 0.0 && self.reward_scale > 0.0) {
            return Err(Error::Config("temperature and reward scale must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("agent.tau = {} must lie in (0, 1]", self.tau)));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config(format!("agent.discount = {} must lie in [0, 1)", self.discount)));
        }
        if self.batch_size == 0 || self.hidden_width == 0 {
            return Err(Error::Config("agent batch size and width must be positive".into()));
        }
        Ok(())
    }
}

/// Losses and diagnostics of one [`Agent::update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub temperature: f64,
    /// Sample estimate of the policy entropy on the batch.
    pub entropy: f64,
    pub q_mean: f64,
}

/// Reparameterised draws for a batch of observations.
struct PolicySample {
    #[cfg_attr(not(test), allow(dead_code))]
    eps: Array2<f64>,
    actions: Array2<f64>,
    log_prob: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    config: AgentConfig,
    state_dim: usize,
    action_dim: usize,
    obs_norm: Normalizer,
    policy: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    log_alpha: f64,
    policy_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    alpha_opt: Adam,
    updates: u64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 − tanh(u)²)` without cancellation.
fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

fn squash_log_std_grad(raw: f64) -> f64 {
    let t = raw.tanh();
    0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t)
}

/// Log-density of the tanh-squashed Gaussian at `a ∈ (-1, 1)`, per dimension
/// summed.
pub fn squashed_log_density(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &mu), &ls)| {
            let u = a.atanh();
            let z = (u - mu) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI - log1m_tanh_sq(u)
        })
        .sum()
}

/// Sum over the batch of `ln π(a|s)` for the actions reparameterised from
/// fixed standard-normal noise `eps`, and its policy gradient.
pub fn log_prob_and_grad(policy: &Mlp, obs: &Array2<f64>, eps: &Array2<f64>) -> (f64, Gradients) {
    let (out, cache) = policy.forward_cached(obs);
    let d = eps.ncols();
    let mut grad = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for i in 0..obs.nrows() {
        for j in 0..d {
            let raw = out[[i, d + j]];
            let ls = squash_log_std(raw);
            let sigma = ls.exp();
            let e = eps[[i, j]];
            let u = out[[i, j]] + sigma * e;
            let a = u.tanh();
            total += -0.5 * e * e - ls - HALF_LN_2PI - log1m_tanh_sq(u);
            grad[[i, j]] = 2.0 * a;
            grad[[i, d + j]] = (-1.0 + 2.0 * a * sigma * e) * squash_log_std_grad(raw);
        }
    }
    (total, policy.backward(&cache, &grad).0)
}

/// Actor loss `mean(α·ln π(ã|s) − min(Q₁, Q₂)(s, ã))` at fixed noise `eps`
/// (observations already standardised). Returns the loss, the mean
/// log-prob and the policy gradient.
pub fn actor_loss_and_grad(
    policy: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    obs: &Array2<f64>,
    eps: &Array2<f64>,
    alpha: f64,
) -> (f64, f64, Gradients) {
    let (out, cache) = policy.forward_cached(obs);
    let d = eps.ncols();
    let sd = obs.ncols();
    let mut actions = Array2::zeros(eps.raw_dim());
    let mut log_prob = Array1::zeros(obs.nrows());
    for i in 0..obs.nrows() {
        for j in 0..d {
            let ls = squash_log_std(out[[i, d + j]]);
            let u = out[[i, j]] + ls.exp() * eps[[i, j]];
            actions[[i, j]] = u.tanh();
            log_prob[i] += -0.5 * eps[[i, j]] * eps[[i, j]] - ls - HALF_LN_2PI - log1m_tanh_sq(u);
        }
    }
    let x = ndarray::concatenate![Axis(1), obs.view(), actions.view()];
    let (v1, c1) = q1.forward_cached(&x);
    let (v2, c2) = q2.forward_cached(&x);
    let ones = Array2::ones(v1.raw_dim());
    let dq1 = q1.input_gradient(&c1, &ones);
    let dq2 = q2.input_gradient(&c2, &ones);
    let b = obs.nrows() as f64;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for i in 0..obs.nrows() {
        let use_first = v1[[i, 0]] <= v2[[i, 0]];
        let qmin = if use_first { v1[[i, 0]] } else { v2[[i, 0]] };
        loss += alpha * log_prob[i] - qmin;
        for j in 0..d {
            let a = actions[[i, j]];
            let raw = out[[i, d + j]];
            let sigma = squash_log_std(raw).exp();
            let e = eps[[i, j]];
            let dq = if use_first { dq1[[i, sd + j]] } else { dq2[[i, sd + j]] };
            let du = dq * (1.0 - a * a);
            grad[[i, j]] = (alpha * 2.0 * a - du) / b;
            let dls = alpha * (-1.0 + 2.0 * a * sigma * e) - du * sigma * e;
            grad[[i, d + j]] = dls * squash_log_std_grad(raw) / b;
        }
    }
    (loss / b, log_prob.mean().unwrap_or(0.0), policy.backward(&cache, &grad).0)
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: AgentConfig,
        obs_norm: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if obs_norm.dim() != state_dim {
            return Err(Error::ShapeMismatch(format!(
                "observation normaliser has {} dims, state has {state_dim}",
                obs_norm.dim()
            )));
        }
        let hidden = vec![config.hidden_width; config.hidden_layers];
        let sizes = |inp: usize, out: usize| {
            let mut v = vec![inp];
            v.extend(&hidden);
            v.push(out);
            v
        };
        let mut policy = Mlp::new(&sizes(state_dim, 2 * action_dim), Activation::Relu, rng);
        if let Some(last) = policy.layers_mut().last_mut() {
            last.weight.fill(0.0);
            last.bias.fill(0.0);
        }
        let q1 = Mlp::new(&sizes(state_dim + action_dim, 1), Activation::Relu, rng);
        let q2 = Mlp::new(&sizes(state_dim + action_dim, 1), Activation::Relu, rng);
        Ok(Self {
            policy_opt: Adam::for_net(config.actor_lr, &policy),
            q1_opt: Adam::for_net(config.critic_lr, &q1),
            q2_opt: Adam::for_net(config.critic_lr, &q2),
            alpha_opt: Adam::new(config.alpha_lr, 1),
            log_alpha: config.initial_temperature.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            config,
            state_dim,
            action_dim,
            obs_norm,
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn temperature(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    pub fn critics(&self) -> (&Mlp, &Mlp) {
        (&self.q1, &self.q2)
    }

    pub fn target_critics(&self) -> (&Mlp, &Mlp) {
        (&self.q1_target, &self.q2_target)
    }

    pub fn policy(&self) -> &Mlp {
        &self.policy
    }

    /// SHA-256 over every parameter and optimiser moment, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn observe(&self, states: &Array2<f64>) -> Array2<f64> {
        self.obs_norm.apply(states)
    }

    fn check_states(&self, states: &Array2<f64>) -> Result<()> {
        if states.ncols() != self.state_dim {
            return Err(Error::ShapeMismatch(format!(
                "agent expects {} state dims, got {}",
                self.state_dim,
                states.ncols()
            )));
        }
        Ok(())
    }

    /// Squashed means and log-stds from the policy head.
    fn heads(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.action_dim;
        (out.slice(s![.., ..d]).to_owned(), out.slice(s![.., d..]).mapv(squash_log_std))
    }

    fn sample_policy<R: Rng + ?Sized>(&self, obs: &Array2<f64>, rng: &mut R) -> PolicySample {
        let out = self.policy.forward(obs);
        let (mean, log_std) = self.heads(&out);
        let eps = Array2::from_shape_fn(mean.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
        let mut actions = Array2::zeros(mean.raw_dim());
        let mut log_prob = Array1::zeros(mean.nrows());
        for i in 0..mean.nrows() {
            for j in 0..self.action_dim {
                let u = mean[[i, j]] + log_std[[i, j]].exp() * eps[[i, j]];
                actions[[i, j]] = u.tanh();
                log_prob[i] += -0.5 * eps[[i, j]] * eps[[i, j]] - log_std[[i, j]] - HALF_LN_2PI - log1m_tanh_sq(u);
            }
        }
        PolicySample {
            eps,
            actions,
            log_prob,
        }
    }

    /// Actions for a batch of raw states: the squashed mean when
    /// `deterministic`, otherwise a reparameterised sample.
    pub fn select_actions<R: Rng + ?Sized>(
        &self,
        states: &Array2<f64>,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        if deterministic {
            return self.greedy_actions(states);
        }
        self.check_states(states)?;
        Ok(self.sample_policy(&self.observe(states), rng).actions)
    }

    /// Squashed means.
    pub fn greedy_actions(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_states(states)?;
        let out = self.policy.forward(&self.observe(states));
        Ok(self.heads(&out).0.mapv(f64::tanh))
    }

    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], deterministic: bool, rng: &mut R) -> Result<Vec<f64>> {
        let a = self.select_actions(&stack_rows(&[state], state.len()), deterministic, rng)?;
        Ok(a.row(0).to_vec())
    }

    /// Mean and log-std of the pre-squash Gaussian at each state.
    pub fn policy_distribution(&self, states: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_states(states)?;
        Ok(self.heads(&self.policy.forward(&self.observe(states))))
    }

    fn critic_input(&self, obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate![Axis(1), obs.view(), actions.view()]
    }

    fn min_target_q(&self, obs: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
        let x = self.critic_input(obs, actions);
        let a = self.q1_target.forward(&x);
        let b = self.q2_target.forward(&x);
        Array1::from_shape_fn(obs.nrows(), |i| a[[i, 0]].min(b[[i, 0]]))
    }

    /// `min(Q₁', Q₂')(s, a) − temperature·log π(a|s)` at one fresh sampled
    /// action per state, in unscaled reward units.
    pub fn value_estimates<R: Rng + ?Sized>(&self, states: &Array2<f64>, rng: &mut R) -> Result<Vec<f64>> {
        self.check_states(states)?;
        let obs = self.observe(states);
        let sample = self.sample_policy(&obs, rng);
        let q = self.min_target_q(&obs, &sample.actions);
        let alpha = self.temperature();
        Ok(q.iter()
            .zip(sample.log_prob.iter())
            .map(|(q, lp)| (q - alpha * lp) / self.config.reward_scale)
            .collect())
    }

    /// `min(Q₁, Q₂)(s, a)` in unscaled reward units.
    pub fn q_values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_states(states)?;
        if actions.nrows() != states.nrows() || actions.ncols() != self.action_dim {
            return Err(Error::ShapeMismatch("actions do not match states and action_dim".into()));
        }
        let x = self.critic_input(&self.observe(states), actions);
        let a = self.q1.forward(&x);
        let b = self.q2.forward(&x);
        Ok((0..states.nrows())
            .map(|i| a[[i, 0]].min(b[[i, 0]]) / self.config.reward_scale)
            .collect())
    }

    pub fn value_estimate<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<f64> {
        Ok(self.value_estimates(&stack_rows(&[state], state.len()), rng)?[0])
    }

    /// Soft Bellman targets in scaled units.
    fn critic_targets<R: Rng + ?Sized>(&self, batch: &[&TransitionRecord], rng: &mut R) -> Array1<f64> {
        let next: Vec<&[f64]> = batch.iter().map(|r| r.next_state.as_slice()).collect();
        let next_obs = self.observe(&stack_rows(&next, self.state_dim));
        let sample = self.sample_policy(&next_obs, rng);
        let q = self.min_target_q(&next_obs, &sample.actions);
        let alpha = self.temperature();
        Array1::from_shape_fn(batch.len(), |i| {
            let r = &batch[i];
            let cont = if r.terminal { 0.0 } else { 1.0 };
            self.config.reward_scale * r.reward + self.config.discount * cont * (q[i] - alpha * sample.log_prob[i])
        })
    }

    /// Mean of `½(Q(s,a) − y)²` and its gradient.
    pub fn critic_loss_and_grad(critic: &Mlp, x: &Array2<f64>, y: &Array1<f64>) -> (f64, Gradients) {
        let (q, cache) = critic.forward_cached(x);
        let b = x.nrows() as f64;
        let mut grad = Array2::zeros(q.raw_dim());
        let mut loss = 0.0;
        for i in 0..x.nrows() {
            let e = q[[i, 0]] - y[i];
            loss += 0.5 * e * e;
            grad[[i, 0]] = e / b;
        }
        (loss / b, critic.backward(&cache, &grad).0)
    }

    fn batch_inputs(&self, batch: &[&TransitionRecord]) -> Result<(Array2<f64>, Array2<f64>)> {
        for r in batch {
            if r.state.len() != self.state_dim || r.action.len() != self.action_dim {
                return Err(Error::ShapeMismatch("batch record dims do not match the agent".into()));
            }
        }
        let states: Vec<&[f64]> = batch.iter().map(|r| r.state.as_slice()).collect();
        let actions: Vec<&[f64]> = batch.iter().map(|r| r.action.as_slice()).collect();
        Ok((
            self.observe(&stack_rows(&states, self.state_dim)),
            stack_rows(&actions, self.action_dim),
        ))
    }

    fn critic_step<R: Rng + ?Sized>(&mut self, batch: &[&TransitionRecord], rng: &mut R) -> Result<(f64, f64)> {
        let (obs, actions) = self.batch_inputs(batch)?;
        let y = self.critic_targets(batch, rng);
        let x = self.critic_input(&obs, &actions);
        let (l1, g1) = Self::critic_loss_and_grad(&self.q1, &x, &y);
        let (l2, g2) = Self::critic_loss_and_grad(&self.q2, &x, &y);
        let loss = 0.5 * (l1 + l2);
        if !loss.is_finite() {
            return Err(self.non_finite("critic", loss, batch));
        }
        self.q1_opt.step_net(&mut self.q1, &g1);
        self.q2_opt.step_net(&mut self.q2, &g2);
        let q_mean = self.q1.forward(&x).mean().unwrap_or(0.0) / self.config.reward_scale;
        Ok((loss, q_mean))
    }

    /// Actor step; returns `(loss, mean log-prob)`.
    fn actor_step<R: Rng + ?Sized>(&mut self, batch: &[&TransitionRecord], rng: &mut R) -> Result<(f64, f64)> {
        let (obs, _) = self.batch_inputs(batch)?;
        let eps = Array2::from_shape_fn((obs.nrows(), self.action_dim), |_| rng.sample::<f64, _>(StandardNormal));
        let (loss, mean_lp, grads) = actor_loss_and_grad(&self.policy, &self.q1, &self.q2, &obs, &eps, self.temperature());
        if !loss.is_finite() {
            return Err(self.non_finite("actor", loss, batch));
        }
        self.policy_opt.step_net(&mut self.policy, &grads);
        Ok((loss, mean_lp))
    }

    fn alpha_step(&mut self, mean_log_prob: f64) -> f64 {
        let target = self.target_entropy();
        let loss = -self.log_alpha * (mean_log_prob + target);
        let grad = -(mean_log_prob + target);
        let mut p = [self.log_alpha];
        self.alpha_opt.step_slice(&mut p, &[grad]);
        self.log_alpha = p[0];
        loss
    }

    fn non_finite(&self, what: &str, loss: f64, batch: &[&TransitionRecord]) -> Error {
        let first = batch.first().map(|r| format!("{r:?}")).unwrap_or_default();
        log::error!("{what} loss {loss} at update {}; first record {first}", self.updates);
        Error::NonFinite(format!("{what} loss {loss} at update {}", self.updates))
    }

    /// One critic, actor and temperature step followed by Polyak averaging
    /// of the target critics.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[&TransitionRecord], rng: &mut R) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let (critic_loss, q_mean) = self.critic_step(batch, rng)?;
        let (actor_loss, mean_lp) = self.actor_step(batch, rng)?;
        let alpha_loss = self.alpha_step(mean_lp);
        self.q1_target.polyak_update(&self.q1, self.config.tau);
        self.q2_target.polyak_update(&self.q2, self.config.tau);
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha_loss,
            temperature: self.temperature(),
            entropy: -mean_lp,
            q_mean,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Text checkpoint: header, config JSON, dims, observation stats,
    /// temperature, update count, five networks (policy, q1, q2, q1', q2')
    /// and four optimiser states (policy, q1, q2, temperature).
    pub fn to_text(&self) -> String {
        let mut out = String::from("riskmbrl-agent v1\n");
        let _ = writeln!(out, "config {}", serde_json::to_string(&self.config).unwrap_or_default());
        let _ = writeln!(out, "dims {} {}", self.state_dim, self.action_dim);
        let _ = writeln!(out, "obs_mean {}", join_floats(&self.obs_norm.mean));
        let _ = writeln!(out, "obs_std {}", join_floats(&self.obs_norm.std));
        let _ = writeln!(out, "log_alpha {:?}", self.log_alpha);
        let _ = writeln!(out, "updates {}", self.updates);
        for net in [&self.policy, &self.q1, &self.q2, &self.q1_target, &self.q2_target] {
            net.write_text(&mut out);
        }
        for opt in [&self.policy_opt, &self.q1_opt, &self.q2_opt, &self.alpha_opt] {
            opt.write_text(&mut out);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("riskmbrl-agent v1") {
            return Err(Error::Format("not an agent checkpoint".into()));
        }
        fn tagged<'a>(lines: &mut impl Iterator<Item = &'a str>, tag: &str) -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing `{tag}` line")))?;
            line.strip_prefix(tag)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| Error::Format(format!("expected `{tag}`, got `{line}`")))
        }
        let config: AgentConfig = serde_json::from_str(&tagged(&mut lines, "config")?)?;
        let dims: Vec<usize> = tagged(&mut lines, "dims")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format("bad dims".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Format("dims needs two fields".into()));
        }
        let obs_norm = Normalizer {
            mean: parse_floats(&tagged(&mut lines, "obs_mean")?)?,
            std: parse_floats(&tagged(&mut lines, "obs_std")?)?,
        };
        let log_alpha = tagged(&mut lines, "log_alpha")?
            .parse()
            .map_err(|_| Error::Format("bad log_alpha".into()))?;
        let updates = tagged(&mut lines, "updates")?
            .parse()
            .map_err(|_| Error::Format("bad update count".into()))?;
        let mut nets = Vec::with_capacity(5);
        for _ in 0..5 {
            nets.push(Mlp::read_text(&mut lines)?);
        }
        let mut opts = Vec::with_capacity(4);
        for _ in 0..4 {
            opts.push(Adam::read_text(&mut lines)?);
        }
        let (sd, ad) = (dims[0], dims[1]);
        if nets[0].input_dim() != sd
            || nets[0].output_dim() != 2 * ad
            || nets[1..].iter().any(|n| n.input_dim() != sd + ad || n.output_dim() != 1)
            || obs_norm.dim() != sd
        {
            return Err(Error::Format("agent network shapes disagree with dims".into()));
        }
        let mut opts = opts.into_iter();
        let mut nets = nets.into_iter();
        let mut next_net = || nets.next().ok_or_else(|| Error::Format("missing network".into()));
        let policy = next_net()?;
        let q1 = next_net()?;
        let q2 = next_net()?;
        let q1_target = next_net()?;
        let q2_target = next_net()?;
        let mut next_opt = || opts.next().ok_or_else(|| Error::Format("missing optimiser".into()));
        Ok(Self {
            config,
            state_dim: sd,
            action_dim: ad,
            obs_norm,
            policy,
            q1,
            q2,
            q1_target,
            q2_target,
            log_alpha,
            policy_opt: next_opt()?,
            q1_opt: next_opt()?,
            q2_opt: next_opt()?,
            alpha_opt: next_opt()?,
            updates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_agent(config: AgentConfig, seed: u64) -> Agent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Agent::new(2, 1, config, Normalizer::identity(2), &mut rng).unwrap()
    }

    fn small_config() -> AgentConfig {
        AgentConfig {
            hidden_width: 8,
            reward_scale: 1.0,
            initial_temperature: 0.2,
            ..AgentConfig::default()
        }
    }

    fn randomize_policy(agent: &mut Agent, rng: &mut ChaCha8Rng) {
        let p: Vec<f64> = agent.policy.params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        agent.policy.set_params(&p).unwrap();
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let agent = small_agent(small_config(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((10, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(10, |_| rng.random_range(-1.0..1.0));
        let (_, g) = Agent::critic_loss_and_grad(&agent.q1, &x, &y);
        let err = max_relative_error(&agent.q1, &g.to_vec(), |m| Agent::critic_loss_and_grad(m, &x, &y).0, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut agent = small_agent(small_config(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        randomize_policy(&mut agent, &mut rng);
        let obs = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((10, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let (_, g) = log_prob_and_grad(&agent.policy, &obs, &eps);
        let err = max_relative_error(&agent.policy, &g.to_vec(), |m| log_prob_and_grad(m, &obs, &eps).0, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
        // the sampler reports the same log-probs
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let s = agent.sample_policy(&obs, &mut rng_a);
        let (total, _) = log_prob_and_grad(&agent.policy, &obs, &s.eps);
        assert!((total - s.log_prob.sum()).abs() < 1e-9);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut agent = small_agent(small_config(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        randomize_policy(&mut agent, &mut rng);
        let obs = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((6, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let alpha = agent.temperature();
        let loss = |policy: &Mlp| {
            let out = policy.forward(&obs);
            let mut total = 0.0;
            for i in 0..obs.nrows() {
                let ls = squash_log_std(out[[i, 1]]);
                let u = out[[i, 0]] + ls.exp() * eps[[i, 0]];
                let a = u.tanh();
                let lp = -0.5 * eps[[i, 0]].powi(2) - ls - HALF_LN_2PI - log1m_tanh_sq(u);
                let x = Array2::from_shape_vec((1, 3), vec![obs[[i, 0]], obs[[i, 1]], a]).unwrap();
                let q = agent.q1.forward(&x)[[0, 0]].min(agent.q2.forward(&x)[[0, 0]]);
                total += alpha * lp - q;
            }
            total / obs.nrows() as f64
        };
        let (l, _, g) = actor_loss_and_grad(&agent.policy, &agent.q1, &agent.q2, &obs, &eps, alpha);
        assert!((l - loss(&agent.policy)).abs() < 1e-12);
        let err = max_relative_error(&agent.policy, &g.to_vec(), loss, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn q_values_are_the_unscaled_critic_minimum() {
        let agent = small_agent(small_config(), 9);
        let s = Array2::from_shape_vec((2, 2), vec![0.1, -0.2, 0.5, 0.3]).unwrap();
        let a = Array2::from_shape_vec((2, 1), vec![-0.4, 0.7]).unwrap();
        let q = agent.q_values(&s, &a).unwrap();
        let x = ndarray::concatenate![Axis(1), s.view(), a.view()];
        let (q1, q2) = (agent.q1.forward(&x), agent.q2.forward(&x));
        for i in 0..2 {
            let want = q1[[i, 0]].min(q2[[i, 0]]) / agent.config.reward_scale;
            assert!((q[i] - want).abs() < 1e-12);
        }
        assert!(agent.q_values(&s, &Array2::zeros((1, 1))).is_err());
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (mu, ls) in [(0.0, -0.5), (0.8, -1.5), (-0.3, 0.3)] {
            let n = 100_000;
            let total: f64 = (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    2.0 * squashed_log_density(&[a], &[mu], &[ls]).exp()
                })
                .sum();
            let integral = total / n as f64;
            assert!((integral - 1.0).abs() < 0.02, "({mu}, {ls}) -> {integral}");
        }
    }

    #[test]
    fn actions_stay_in_box_and_deterministic_is_repeatable() {
        let mut agent = small_agent(small_config(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = agent.policy.params().iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        agent.policy.set_params(&p).unwrap();
        let states = Array2::from_shape_fn((200, 2), |_| rng.random_range(-3.0..3.0));
        let acts = agent.select_actions(&states, false, &mut rng).unwrap();
        assert!(acts.iter().all(|a| (-1.0..=1.0).contains(a)));
        let a1 = agent.select_action(&[0.3, 0.1], true, &mut rng).unwrap();
        let a2 = agent.select_action(&[0.3, 0.1], true, &mut rng).unwrap();
        assert_eq!(a1, a2);
        // fresh agents act with the zero mean
        let fresh = small_agent(small_config(), 9);
        assert_eq!(fresh.select_action(&[1.0, 2.0], true, &mut rng).unwrap(), vec![0.0]);
    }

    #[test]
    fn tiny_std_samples_converge_to_mean() {
        let mut agent = small_agent(small_config(), 10);
        let last = agent.policy.layers_mut().last_mut().unwrap();
        last.bias[0] = 0.3;
        last.bias[1] = -50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let det = agent.select_action(&[0.0, 0.0], true, &mut rng).unwrap()[0];
        let stoch = agent.select_action(&[0.0, 0.0], false, &mut rng).unwrap()[0];
        // log-std is floored at -5, so the sample sits within a few σ of the mean
        assert!((det - stoch).abs() < 5.0 * LOG_STD_MIN.exp(), "{det} {stoch}");
    }

    #[test]
    fn tau_one_copies_critics() {
        let cfg = AgentConfig {
            tau: 1.0,
            batch_size: 4,
            ..small_config()
        };
        let mut agent = small_agent(cfg, 11);
        let rec = TransitionRecord {
            state: vec![0.1, 0.2],
            action: vec![0.5],
            reward: 1.0,
            next_state: vec![0.2, 0.3],
            terminal: false,
        };
        let batch = vec![&rec; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        agent.update(&batch, &mut rng).unwrap();
        assert_eq!(agent.q1_target, agent.q1);
        assert_eq!(agent.q2_target, agent.q2);
    }

    #[test]
    fn polyak_shrinks_distance_by_one_minus_tau() {
        let mut agent = small_agent(small_config(), 12);
        let rec = TransitionRecord {
            state: vec![0.1, 0.2],
            action: vec![0.5],
            reward: 1.0,
            next_state: vec![0.2, 0.3],
            terminal: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        agent.update(&[&rec], &mut rng).unwrap();
        let before = agent.q1_target.sup_distance(&agent.q1);
        let mut target = agent.q1_target.clone();
        target.polyak_update(&agent.q1, 0.25);
        let after = target.sup_distance(&agent.q1);
        assert!((after - 0.75 * before).abs() < 1e-12 * before.max(1.0));
    }

    fn bandit_mean_action(reward: impl Fn(f64) -> f64, target_entropy: f64, seed: u64) -> f64 {
        let cfg = AgentConfig {
            target_entropy: Some(target_entropy),
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            reward_scale: 1.0,
            batch_size: 64,
            hidden_width: 32,
            ..AgentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agent = Agent::new(1, 1, cfg, Normalizer::identity(1), &mut rng).unwrap();
        for _ in 0..8000 {
            let acts = agent.select_actions(&Array2::zeros((64, 1)), false, &mut rng).unwrap();
            let recs: Vec<TransitionRecord> = acts
                .iter()
                .map(|&a| TransitionRecord {
                    state: vec![0.0],
                    action: vec![a],
                    reward: reward(a),
                    next_state: vec![0.0],
                    terminal: true,
                })
                .collect();
            let batch: Vec<&TransitionRecord> = recs.iter().collect();
            agent.update(&batch, &mut rng).unwrap();
        }
        agent.select_action(&[0.0], true, &mut rng).unwrap()[0]
    }

    #[test]
    fn bandit_converges_to_best_action() {
        let a = bandit_mean_action(|a| a, -5.0, 13);
        assert!(a > 0.95, "linear bandit mean action {a}");
        let a = bandit_mean_action(|a| -(a - 0.4) * (a - 0.4), -1.0, 14);
        assert!((a - 0.4).abs() < 0.05, "quadratic bandit mean action {a}");
    }

    #[test]
    fn entropy_constraint_bounds_linear_bandit() {
        // max E[tanh(u)] subject to squashed entropy >= -1, solved by grid
        // search over (μ, log σ) with 2e5 normal draws: tanh(μ*) = 0.914
        let a = bandit_mean_action(|a| a, -1.0, 13);
        assert!((a - 0.914).abs() < 0.03, "linear bandit mean action {a}");
    }

    #[test]
    fn zero_reward_critic_reaches_entropy_value() {
        let cfg = AgentConfig {
            critic_lr: 1e-3,
            discount: 0.5,
            tau: 0.05,
            initial_temperature: 0.05,
            ..small_config()
        };
        let mut agent = small_agent(cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let recs: Vec<TransitionRecord> = (0..32)
            .map(|_| TransitionRecord {
                state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                action: vec![rng.random_range(-1.0..1.0)],
                reward: 0.0,
                next_state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                terminal: false,
            })
            .collect();
        let batch: Vec<&TransitionRecord> = recs.iter().collect();
        let mut loss = f64::INFINITY;
        for _ in 0..6000 {
            loss = agent.critic_step(&batch, &mut rng).unwrap().0;
            agent.q1_target.polyak_update(&agent.q1, agent.config.tau);
            agent.q2_target.polyak_update(&agent.q2, agent.config.tau);
        }
        assert!(loss < 1e-3, "critic loss {loss}");
        // frozen fresh policy: log_std = -1.5 and zero mean at every state
        let states = Array2::zeros((20_000, 2));
        let obs = agent.observe(&states);
        let lp = agent.sample_policy(&obs, &mut rng).log_prob.mean().unwrap();
        let expected = -0.05 * lp * 0.5 / (1.0 - 0.5);
        let (bobs, bact) = agent.batch_inputs(&batch).unwrap();
        let q = agent.q1.forward(&agent.critic_input(&bobs, &bact)).mean().unwrap();
        assert!((q - expected).abs() < 3e-3, "q {q} expected {expected}");
    }

    #[test]
    fn temperature_moves_towards_target_entropy() {
        let cfg = AgentConfig {
            actor_lr: 0.0,
            ..small_config()
        };
        for (target, seed) in [(-1.0, 16), (3.0, 17)] {
            let mut agent = small_agent(
                AgentConfig {
                    target_entropy: Some(target),
                    ..cfg.clone()
                },
                seed,
            );
            let rec = TransitionRecord {
                state: vec![0.1, 0.2],
                action: vec![0.5],
                reward: 1.0,
                next_state: vec![0.2, 0.3],
                terminal: false,
            };
            let batch = vec![&rec; 64];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let before = agent.temperature();
                let stats = agent.update(&batch, &mut rng).unwrap();
                let moved = stats.temperature - before;
                // too much entropy lowers the temperature, too little raises it
                assert_eq!(moved < 0.0, stats.entropy > target, "entropy {} target {target}", stats.entropy);
            }
        }
    }

    #[test]
    fn value_estimate_examples() {
        let mut agent = small_agent(
            AgentConfig {
                initial_temperature: 1e-12,
                ..small_config()
            },
            18,
        );
        for net in [&mut agent.q1_target, &mut agent.q2_target] {
            for l in net.layers_mut() {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        assert!(agent.value_estimate(&[0.5, 0.5], &mut rng).unwrap().abs() < 1e-9);

        agent.log_alpha = 0.3f64.ln();
        agent.q1_target.layers_mut().last_mut().unwrap().bias[0] = 1.0;
        agent.q2_target.layers_mut().last_mut().unwrap().bias[0] = 2.0;
        let n = 20_000;
        let states = Array2::zeros((n, 2));
        let est = agent.value_estimates(&states, &mut rng).unwrap();
        let mean = est.iter().sum::<f64>() / n as f64;
        let lp = agent.sample_policy(&agent.observe(&states), &mut rng).log_prob.mean().unwrap();
        assert!((mean - (1.0 - 0.3 * lp)).abs() < 0.02, "{mean} vs {}", 1.0 - 0.3 * lp);

        // a critic increasing in the first state coordinate keeps the ordering
        let mut mono = small_agent(
            AgentConfig {
                initial_temperature: 1e-6,
                ..small_config()
            },
            19,
        );
        for net in [&mut mono.q1_target, &mut mono.q2_target] {
            let n_layers = net.layers().len();
            for (k, l) in net.layers_mut().iter_mut().enumerate() {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
                if k + 1 < n_layers {
                    l.weight[[0, 0]] = 1.0;
                    l.bias[0] = 10.0;
                } else {
                    l.weight[[0, 0]] = 1.0;
                }
            }
        }
        let lo = mono.value_estimate(&[0.1, 0.0], &mut rng).unwrap();
        let hi = mono.value_estimate(&[0.9, 0.0], &mut rng).unwrap();
        assert!(hi > lo, "{lo} {hi}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut agent = small_agent(small_config(), 20);
        let rec = TransitionRecord {
            state: vec![0.1, 0.2],
            action: vec![0.5],
            reward: 1.0,
            next_state: vec![0.2, 0.3],
            terminal: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..3 {
            agent.update(&[&rec, &rec], &mut rng).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("agent.txt");
        agent.save(&p).unwrap();
        let back = Agent::load(&p).unwrap();
        assert_eq!(back, agent);
        assert_eq!(back.fingerprint(), agent.fingerprint());
    }

    #[test]
    fn rejects_bad_shapes() {
        let agent = small_agent(small_config(), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        assert!(agent.select_action(&[0.0, 0.0, 0.0], true, &mut rng).is_err());
        let mut agent = agent;
        assert!(agent.update(&[], &mut rng).is_err());
    }
}
