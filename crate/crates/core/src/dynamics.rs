//! Learned belief over transition functions: an ensemble of feedforward
//! networks, each predicting a diagonal Gaussian over `(s', r)`.
//!
//! Inputs are the standardised concatenation `[s, a]`. Targets are the
//! standardised `[s' − s, r]` (or `[s', r]` when the ensemble predicts
//! absolute successors). Members are trained independently by maximum
//! likelihood on the training split, or on bootstrap resamples of it when
//! `bootstrap` is set; the elites are the members with
//! the lowest Gaussian NLL on a held-out split. Sampling from the aggregate
//! transition function picks a uniformly random elite per draw and then
//! samples that member's Gaussian jointly for `s'` and `r`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, OfflineDataset};
use crate::error::{Error, Result};
use crate::nn::{join_floats, parse_floats, Activation, Adam, Gradients, Mlp};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Training knobs for [`fit_ensemble`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_members: usize,
    pub n_elites: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Holdout size is `min(holdout_max, holdout_fraction · len)`.
    pub holdout_max: usize,
    pub holdout_fraction: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Train each member on its own resample (with replacement) of the
    /// training split.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_members: 7,
            n_elites: 5,
            hidden_layers: 4,
            hidden_width: 64,
            epochs: 20,
            batch_size: 256,
            learning_rate: 3e-4,
            holdout_max: 1000,
            holdout_fraction: 0.1,
            logvar_min: -10.0,
            logvar_max: 2.0,
            bootstrap: false,
            seed: 0,
        }
    }
}

/// One ensemble member: an MLP emitting `[mean, log-variance]` over the
/// target dimensions, with the log-variance softly clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    mlp: Mlp,
    target_dim: usize,
    /// Soft bounds on the log-variance; `None` leaves it raw.
    logvar_clamp: Option<(f64, f64)>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FeedforwardNet {
    pub fn new(mlp: Mlp, logvar_clamp: Option<(f64, f64)>) -> Result<Self> {
        let out = mlp.output_dim();
        if out == 0 || out % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("member output width {out} is not 2·target_dim")));
        }
        Ok(Self {
            mlp,
            target_dim: out / 2,
            logvar_clamp,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// Clamped log-variance and its derivative with respect to the raw output.
    fn clamp(&self, raw: f64) -> (f64, f64) {
        match self.logvar_clamp {
            None => (raw, 1.0),
            Some((lo, hi)) => {
                let upper = hi - softplus(hi - raw);
                let d_upper = sigmoid(hi - raw);
                let lv = lo + softplus(upper - lo);
                if lv > hi {
                    (hi, 0.0)
                } else {
                    (lv, d_upper * sigmoid(upper - lo))
                }
            }
        }
    }

    /// Mean and log-variance in normalised target space.
    pub fn predict(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let out = self.mlp.forward(x);
        self.split(&out)
    }

    fn split(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.target_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let logvar = out.slice(s![.., d..]).mapv(|r| self.clamp(r).0);
        (mean, logvar)
    }

    /// Mean Gaussian NLL per sample (summed over target dims, including the
    /// `½·log 2π` constant).
    pub fn nll(&self, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let (mean, logvar) = self.predict(x);
        gaussian_nll(&mean, &logvar, y)
    }

    /// NLL on a batch and its parameter gradient.
    pub fn nll_and_grad(&self, x: &Array2<f64>, y: &Array2<f64>) -> (f64, Gradients) {
        let (out, cache) = self.mlp.forward_cached(x);
        let d = self.target_dim;
        let b = x.nrows() as f64;
        let mut grad = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..x.nrows() {
            for j in 0..d {
                let mu = out[[i, j]];
                let (lv, dlv) = self.clamp(out[[i, d + j]]);
                let inv_var = (-lv).exp();
                let err = mu - y[[i, j]];
                loss += 0.5 * (err * err * inv_var + lv + LN_2PI);
                grad[[i, j]] = err * inv_var / b;
                grad[[i, d + j]] = 0.5 * (1.0 - err * err * inv_var) * dlv / b;
            }
        }
        let (grads, _) = self.mlp.backward(&cache, &grad);
        (loss / b, grads)
    }
}

fn gaussian_nll(mean: &Array2<f64>, logvar: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for ((m, lv), t) in mean.iter().zip(logvar.iter()).zip(y.iter()) {
        let e = m - t;
        total += 0.5 * (e * e * (-lv).exp() + lv + LN_2PI);
    }
    total / mean.nrows().max(1) as f64
}

/// Parameters of an untrained ensemble whose members are constant Gaussians
/// `N(μᵢ, σ_A²)` with `μᵢ ~ N(μ₀, σ_E²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGaussianSpec {
    pub mu0: f64,
    pub sigma_epistemic: f64,
    pub sigma_aleatoric: f64,
    pub n_members: usize,
}

/// `P(T|D)` as a uniform distribution over the elite members.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnsemble {
    members: Vec<FeedforwardNet>,
    elites: Vec<usize>,
    state_dim: usize,
    action_dim: usize,
    predict_delta: bool,
    input_norm: Normalizer,
    target_norm: Normalizer,
    holdout_nll: Vec<f64>,
    config: Option<ModelConfig>,
}

/// One successor draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessorSample {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Which member produced the draw.
    pub member: usize,
}

/// Diagnostics from [`fit_ensemble`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Training-split NLL of each member before training and after every epoch.
    pub train_nll: Vec<Vec<f64>>,
    pub holdout_nll: Vec<f64>,
    pub elites: Vec<usize>,
    pub n_train: usize,
    pub n_holdout: usize,
}

impl GaussianEnsemble {
    pub fn new(
        members: Vec<FeedforwardNet>,
        elites: Vec<usize>,
        state_dim: usize,
        action_dim: usize,
        predict_delta: bool,
        input_norm: Normalizer,
        target_norm: Normalizer,
    ) -> Result<Self> {
        let target_dim = state_dim + 1;
        for m in &members {
            if m.mlp.input_dim() != state_dim + action_dim || m.target_dim != target_dim {
                return Err(Error::ShapeMismatch("member shape does not match ensemble dims".into()));
            }
        }
        if elites.len() > members.len() || elites.iter().any(|&e| e >= members.len()) {
            return Err(Error::ShapeMismatch("elite index out of range".into()));
        }
        if input_norm.dim() != state_dim + action_dim || target_norm.dim() != target_dim {
            return Err(Error::ShapeMismatch("normaliser dims".into()));
        }
        Ok(Self {
            members,
            elites,
            state_dim,
            action_dim,
            predict_delta,
            input_norm,
            target_norm,
            holdout_nll: Vec::new(),
            config: None,
        })
    }

    pub fn members(&self) -> &[FeedforwardNet] {
        &self.members
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn holdout_nll(&self) -> &[f64] {
        &self.holdout_nll
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        self.config.as_ref()
    }

    fn inputs(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim || states.nrows() != actions.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "query ({}x{}, {}x{}) vs ensemble dims ({}, {})",
                states.nrows(),
                states.ncols(),
                actions.nrows(),
                actions.ncols(),
                self.state_dim,
                self.action_dim
            )));
        }
        let x = ndarray::concatenate![Axis(1), states.view(), actions.view()];
        Ok(self.input_norm.apply(&x))
    }

    /// Per-member predictive mean and variance of `[s', r]` in raw units.
    pub fn predict_member(
        &self,
        member: usize,
        states: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = self.inputs(states, actions)?;
        Ok(self.member_moments(member, &x, states))
    }

    fn member_moments(&self, member: usize, x: &Array2<f64>, states: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (mean_n, logvar) = self.members[member].predict(x);
        let mut mean = self.target_norm.invert(&mean_n);
        let mut var = logvar.mapv(f64::exp);
        for mut row in var.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.target_norm.std[j] * self.target_norm.std[j];
            }
        }
        if self.predict_delta {
            let sd = self.state_dim;
            let mut head = mean.slice_mut(s![.., ..sd]);
            head += states;
        }
        (mean, var)
    }

    /// `m` i.i.d. draws from the aggregate transition function at `(s, a)`.
    pub fn sample_successors<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action: &[f64],
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<SuccessorSample>> {
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let a = Array2::from_shape_vec((1, action.len()), action.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.sample_successors_batch(&s, &a, m, rng)?.pop().unwrap_or_default())
    }

    /// Batched version of [`sample_successors`](Self::sample_successors):
    /// row `i` of the result holds the `m` draws for row `i` of the query.
    pub fn sample_successors_batch<R: Rng + ?Sized>(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<SuccessorSample>>> {
        if self.elites.is_empty() {
            return Err(Error::UntrainedEnsemble);
        }
        if m == 0 {
            return Err(Error::InvalidParameter {
                name: "m",
                value: 0.0,
                reason: "need at least one candidate",
            });
        }
        let x = self.inputs(states, actions)?;
        let moments: Vec<(Array2<f64>, Array2<f64>)> =
            self.elites.iter().map(|&e| self.member_moments(e, &x, states)).collect();
        let sd = self.state_dim;
        let mut out = Vec::with_capacity(states.nrows());
        for i in 0..states.nrows() {
            let mut draws = Vec::with_capacity(m);
            for _ in 0..m {
                let k = rng.random_range(0..self.elites.len());
                let (mean, var) = &moments[k];
                let mut vals = Vec::with_capacity(sd + 1);
                for j in 0..=sd {
                    let z: f64 = rng.sample(StandardNormal);
                    vals.push(mean[[i, j]] + var[[i, j]].sqrt() * z);
                }
                let reward = vals.pop().unwrap_or(0.0);
                draws.push(SuccessorSample {
                    next_state: vals,
                    reward,
                    member: self.elites[k],
                });
            }
            out.push(draws);
        }
        Ok(out)
    }

    /// Standard deviation across elite means, averaged over target dims, for
    /// each query row. Measures epistemic disagreement.
    pub fn member_disagreement(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Vec<f64>> {
        if self.elites.is_empty() {
            return Err(Error::UntrainedEnsemble);
        }
        let x = self.inputs(states, actions)?;
        let means: Vec<Array2<f64>> = self.elites.iter().map(|&e| self.member_moments(e, &x, states).0).collect();
        let k = means.len() as f64;
        let cols = self.state_dim + 1;
        Ok((0..states.nrows())
            .map(|i| {
                (0..cols)
                    .map(|j| {
                        let mu = means.iter().map(|m| m[[i, j]]).sum::<f64>() / k;
                        (means.iter().map(|m| (m[[i, j]] - mu).powi(2)).sum::<f64>() / k).sqrt()
                    })
                    .sum::<f64>()
                    / cols as f64
            })
            .collect())
    }

    /// Writes the checkpoint text format (see [`GaussianEnsemble::to_text`]).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Line-oriented checkpoint:
    ///
    /// ```text
    /// riskmbrl-ensemble v1
    /// dims <state_dim> <action_dim> <predict_delta 0|1>
    /// input_mean .. / input_std .. / target_mean .. / target_std ..
    /// elites <indices..>
    /// holdout_nll <values..>
    /// config <json | none>
    /// members <n>
    /// clamp <lo> <hi> | clamp none      (per member, followed by its mlp block)
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::from("riskmbrl-ensemble v1\n");
        let _ = writeln!(out, "dims {} {} {}", self.state_dim, self.action_dim, u8::from(self.predict_delta));
        let _ = writeln!(out, "input_mean {}", join_floats(&self.input_norm.mean));
        let _ = writeln!(out, "input_std {}", join_floats(&self.input_norm.std));
        let _ = writeln!(out, "target_mean {}", join_floats(&self.target_norm.mean));
        let _ = writeln!(out, "target_std {}", join_floats(&self.target_norm.std));
        let elites: Vec<String> = self.elites.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(out, "elites {}", elites.join(" "));
        let _ = writeln!(out, "holdout_nll {}", join_floats(&self.holdout_nll));
        match &self.config {
            Some(c) => {
                let _ = writeln!(out, "config {}", serde_json::to_string(c).unwrap_or_default());
            }
            None => out.push_str("config none\n"),
        }
        let _ = writeln!(out, "members {}", self.members.len());
        for m in &self.members {
            match m.logvar_clamp {
                Some((lo, hi)) => {
                    let _ = writeln!(out, "clamp {lo:?} {hi:?}");
                }
                None => out.push_str("clamp none\n"),
            }
            m.mlp.write_text(&mut out);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("riskmbrl-ensemble v1") {
            return Err(Error::Format("not an ensemble checkpoint".into()));
        }
        fn tagged<'a>(lines: &mut impl Iterator<Item = &'a str>, tag: &str) -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing `{tag}` line")))?;
            line.strip_prefix(tag)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| Error::Format(format!("expected `{tag}`, got `{line}`")))
        }
        let dims: Vec<usize> = tagged(&mut lines, "dims")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format("bad dims".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Format("dims needs three fields".into()));
        }
        let input_norm = Normalizer {
            mean: parse_floats(&tagged(&mut lines, "input_mean")?)?,
            std: parse_floats(&tagged(&mut lines, "input_std")?)?,
        };
        let target_norm = Normalizer {
            mean: parse_floats(&tagged(&mut lines, "target_mean")?)?,
            std: parse_floats(&tagged(&mut lines, "target_std")?)?,
        };
        let elites: Vec<usize> = tagged(&mut lines, "elites")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format("bad elite index".into())))
            .collect::<Result<_>>()?;
        let holdout_nll = parse_floats(&tagged(&mut lines, "holdout_nll")?)?;
        let config_line = tagged(&mut lines, "config")?;
        let config = if config_line == "none" {
            None
        } else {
            Some(serde_json::from_str(&config_line)?)
        };
        let n: usize = tagged(&mut lines, "members")?
            .parse()
            .map_err(|_| Error::Format("bad member count".into()))?;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let clamp_line = tagged(&mut lines, "clamp")?;
            let clamp = if clamp_line == "none" {
                None
            } else {
                let v = parse_floats(&clamp_line)?;
                if v.len() != 2 {
                    return Err(Error::Format("clamp needs two bounds".into()));
                }
                Some((v[0], v[1]))
            };
            let mlp = Mlp::read_text(&mut lines)?;
            members.push(FeedforwardNet::new(mlp, clamp)?);
        }
        let mut ens = Self::new(members, elites, dims[0], dims[1], dims[2] != 0, input_norm, target_norm)?;
        ens.holdout_nll = holdout_nll;
        ens.config = config;
        Ok(ens)
    }
}

/// Input and target normalisation stats from a set of record indices.
pub fn normalize_inputs(data: &OfflineDataset, indices: &[usize]) -> (Normalizer, Normalizer) {
    let (x, y) = design_matrices(data, indices, true);
    (Normalizer::fit(&x), Normalizer::fit(&y))
}

fn design_matrices(data: &OfflineDataset, indices: &[usize], delta: bool) -> (Array2<f64>, Array2<f64>) {
    let sd = data.state_dim();
    let ad = data.action_dim();
    let recs = data.records();
    let x = Array2::from_shape_fn((indices.len(), sd + ad), |(i, j)| {
        let r = &recs[indices[i]];
        if j < sd {
            r.state[j]
        } else {
            r.action[j - sd]
        }
    });
    let y = Array2::from_shape_fn((indices.len(), sd + 1), |(i, j)| {
        let r = &recs[indices[i]];
        if j < sd {
            if delta {
                r.next_state[j] - r.state[j]
            } else {
                r.next_state[j]
            }
        } else {
            r.reward
        }
    });
    (x, y)
}

/// Trains `config.n_members` members on a shared training split and keeps
/// the `config.n_elites` with the lowest holdout NLL.
pub fn fit_ensemble(data: &OfflineDataset, config: &ModelConfig) -> Result<(GaussianEnsemble, FitReport)> {
    if config.n_members == 0 || config.n_elites == 0 || config.n_elites > config.n_members {
        return Err(Error::Config(format!(
            "need 1 <= n_elites ({}) <= n_members ({})",
            config.n_elites, config.n_members
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n = data.len();
    let n_holdout = config
        .holdout_max
        .min((config.holdout_fraction * n as f64).floor() as usize);
    if n < 20 || n_holdout == 0 {
        return Err(Error::InsufficientData(format!(
            "{n} records leave {n_holdout} for validation"
        )));
    }
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let (holdout_idx, train_idx) = order.split_at(n_holdout);

    let (x_raw, y_raw) = design_matrices(data, train_idx, true);
    let input_norm = Normalizer::fit(&x_raw);
    let target_norm = Normalizer::fit(&y_raw);
    let x_train = input_norm.apply(&x_raw);
    let y_train = target_norm.apply(&y_raw);
    let (xh, yh) = design_matrices(data, holdout_idx, true);
    let x_hold = input_norm.apply(&xh);
    let y_hold = target_norm.apply(&yh);

    let in_dim = data.state_dim() + data.action_dim();
    let target_dim = data.state_dim() + 1;
    let mut sizes = vec![in_dim];
    sizes.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
    sizes.push(2 * target_dim);

    let trained: Vec<Result<(FeedforwardNet, Vec<f64>, f64)>> = (0..config.n_members)
        .into_par_iter()
        .map(|member| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(member as u64 + 1);
            let mlp = Mlp::new(&sizes, Activation::Silu, &mut rng);
            let mut net = FeedforwardNet::new(mlp, Some((config.logvar_min, config.logvar_max)))?;
            let mut opt = Adam::for_net(config.learning_rate, &net.mlp);
            let mut history = vec![net.nll(&x_train, &y_train)];
            let n_train = x_train.nrows();
            let mut perm: Vec<usize> = if config.bootstrap {
                (0..n_train).map(|_| rng.random_range(0..n_train)).collect()
            } else {
                (0..n_train).collect()
            };
            for epoch in 0..config.epochs {
                perm.shuffle(&mut rng);
                for chunk in perm.chunks(config.batch_size) {
                    let xb = x_train.select(Axis(0), chunk);
                    let yb = y_train.select(Axis(0), chunk);
                    let (loss, grads) = net.nll_and_grad(&xb, &yb);
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "member {member} loss {loss} at epoch {epoch}"
                        )));
                    }
                    opt.step_net(&mut net.mlp, &grads);
                }
                history.push(net.nll(&x_train, &y_train));
            }
            let hold = net.nll(&x_hold, &y_hold);
            Ok((net, history, hold))
        })
        .collect();

    let mut members = Vec::with_capacity(config.n_members);
    let mut train_nll = Vec::with_capacity(config.n_members);
    let mut holdout_nll = Vec::with_capacity(config.n_members);
    for r in trained {
        let (net, hist, hold) = r?;
        members.push(net);
        train_nll.push(hist);
        holdout_nll.push(hold);
    }
    let mut ranked: Vec<usize> = (0..config.n_members).collect();
    ranked.sort_by(|&a, &b| holdout_nll[a].total_cmp(&holdout_nll[b]).then(a.cmp(&b)));
    let mut elites: Vec<usize> = ranked[..config.n_elites].to_vec();
    elites.sort_unstable();

    let mut ens = GaussianEnsemble::new(
        members,
        elites.clone(),
        data.state_dim(),
        data.action_dim(),
        true,
        input_norm,
        target_norm,
    )?;
    ens.holdout_nll = holdout_nll.clone();
    ens.config = Some(config.clone());
    let report = FitReport {
        train_nll,
        holdout_nll,
        elites,
        n_train: train_idx.len(),
        n_holdout,
    };
    Ok((ens, report))
}

/// Ensemble of constant Gaussian members over a 1-D state with a 1-D
/// action: member `i` predicts `s' ~ N(μᵢ, σ_A²)` with `μᵢ ~ N(μ₀, σ_E²)`
/// and a deterministic zero reward. All members are elites.
pub fn build_synthetic_ensemble<R: Rng + ?Sized>(spec: &SyntheticGaussianSpec, rng: &mut R) -> Result<GaussianEnsemble> {
    if spec.n_members == 0 {
        return Err(Error::Config("synthetic ensemble needs at least one member".into()));
    }
    if !(spec.sigma_epistemic >= 0.0 && spec.sigma_aleatoric >= 0.0) {
        return Err(Error::Config("synthetic sigmas must be non-negative".into()));
    }
    let members = (0..spec.n_members)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            constant_member(&[spec.mu0 + spec.sigma_epistemic * z], 0.0, &[spec.sigma_aleatoric], 0.0, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianEnsemble::new(
        members,
        (0..spec.n_members).collect(),
        1,
        1,
        false,
        Normalizer::identity(2),
        Normalizer::identity(2),
    )
}

/// Like [`build_synthetic_ensemble`], but member `i` sits at the posterior
/// quantile `μ₀ + σ_E·Φ⁻¹((i + ½)/N)` instead of a random draw.
pub fn build_stratified_ensemble(spec: &SyntheticGaussianSpec) -> Result<GaussianEnsemble> {
    if spec.n_members == 0 {
        return Err(Error::Config("synthetic ensemble needs at least one member".into()));
    }
    if !(spec.sigma_epistemic >= 0.0 && spec.sigma_aleatoric >= 0.0) {
        return Err(Error::Config("synthetic sigmas must be non-negative".into()));
    }
    let n = spec.n_members as f64;
    let members = (0..spec.n_members)
        .map(|i| {
            let z = crate::normal::quantile((i as f64 + 0.5) / n);
            constant_member(&[spec.mu0 + spec.sigma_epistemic * z], 0.0, &[spec.sigma_aleatoric], 0.0, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianEnsemble::new(
        members,
        (0..spec.n_members).collect(),
        1,
        1,
        false,
        Normalizer::identity(2),
        Normalizer::identity(2),
    )
}

/// A member ignoring its input and predicting `N(next_mean, diag(next_std²))`
/// for the successor and `N(reward_mean, reward_std²)` for the reward.
/// Zero standard deviations give point masses.
pub fn constant_member(
    next_mean: &[f64],
    reward_mean: f64,
    next_std: &[f64],
    reward_std: f64,
    action_dim: usize,
) -> Result<FeedforwardNet> {
    let sd = next_mean.len();
    if next_std.len() != sd {
        return Err(Error::ShapeMismatch("mean/std length".into()));
    }
    let mut mlp = Mlp::zeros(&[sd + action_dim, 2 * (sd + 1)], Activation::Silu);
    let bias = &mut mlp.layers_mut()[0].bias;
    for j in 0..sd {
        bias[j] = next_mean[j];
        bias[sd + 1 + j] = (next_std[j] * next_std[j]).ln();
    }
    bias[sd] = reward_mean;
    bias[2 * sd + 1] = (reward_std * reward_std).ln();
    FeedforwardNet::new(mlp, None)
}
