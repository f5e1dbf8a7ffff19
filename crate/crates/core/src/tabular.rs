//! Exact risk-sensitive dynamic programming on finite MDPs.
//!
//! The one-step risk of a successor row is evaluated exactly for arbitrary
//! (non-uniform) transition probabilities: CVaR by greedy mass filling from
//! the worst successor (every weight capped at `p/α`), Wang by distorting the
//! cumulative distribution. Stochastic policies take the expectation over
//! actions outside the one-step risk:
//!
//! `V(s) = Σ_a π(a|s) [R(s,a) + γ ρ(V(s') | s' ~ T(s,a,·))]`.

use std::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::normal;
use crate::risk::RiskSpec;

const ROW_TOL: f64 = 1e-9;

/// Default sweep cap for the fixed-point solvers.
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;

/// A finite MDP `(S, A, T, R, s₀, γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
    initial_state: usize,
    discount: f64,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_state: usize,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::ShapeMismatch("MDP needs at least one state and action".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::ShapeMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if initial_state >= n_states {
            return Err(Error::ShapeMismatch(format!("initial state {initial_state} out of range")));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(invalid("discount", discount, "must lie strictly inside (0, 1)"));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward".into()));
        }
        for row in transition.chunks(n_states) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidDistribution(format!("transition row sums to {sum}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial_state,
            discount,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Same MDP with a different discount factor.
    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(invalid("discount", discount, "must lie strictly inside (0, 1)"));
        }
        self.discount = discount;
        Ok(self)
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// State values `V(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
}

impl ValueTable {
    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Action probabilities `π(a|s)`, row-major `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::ShapeMismatch("policy table shape".into()));
        }
        for row in probs.chunks(n_actions) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidDistribution(format!("policy row sums to {sum}")));
            }
        }
        Ok(Self { n_actions, probs })
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::ShapeMismatch(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    /// Most likely action in each state (lowest index on ties).
    pub fn greedy_actions(&self) -> Vec<usize> {
        self.probs
            .chunks(self.n_actions)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (a, &p)| if p > best.1 { (a, p) } else { best })
                    .0
            })
            .collect()
    }
}

/// One-step risk of `values` under successor probabilities `probs`.
///
/// CVaR uses the envelope `{0 ≤ ξ ≤ 1/α, Σ ξ·p = 1}`, solved by assigning
/// `p/α` to successors worst-first until the unit budget is exhausted.
pub fn weighted_risk(values: &[f64], probs: &[f64], spec: RiskSpec) -> f64 {
    match spec {
        RiskSpec::Neutral => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
        RiskSpec::Cvar { alpha } => {
            let order = ascending(values, probs);
            let mut budget = 1.0;
            let mut acc = 0.0;
            for i in order {
                if budget <= 0.0 {
                    break;
                }
                let mass = (probs[i] / alpha).min(budget);
                acc += mass * values[i];
                budget -= mass;
            }
            acc
        }
        RiskSpec::Wang { eta } => {
            let order = ascending(values, probs);
            let mut cum = 0.0;
            let mut prev_g = 0.0;
            let mut acc = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                cum += probs[i];
                let g = if rank + 1 == order.len() || cum >= 1.0 {
                    1.0
                } else {
                    normal::cdf(normal::quantile(cum) + eta)
                };
                acc += (g - prev_g) * values[i];
                prev_g = g;
            }
            acc
        }
    }
}

fn ascending(values: &[f64], probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| probs[i] > 0.0).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

fn check_compatible(mdp: &TabularMDP, policy: &PolicyTable) -> Result<()> {
    if policy.n_actions != mdp.n_actions || policy.n_states() != mdp.n_states {
        return Err(Error::ShapeMismatch("policy does not match MDP".into()));
    }
    Ok(())
}

fn q_value(mdp: &TabularMDP, values: &[f64], s: usize, a: usize, spec: RiskSpec) -> f64 {
    mdp.reward(s, a) + mdp.discount * weighted_risk(values, mdp.transition_row(s, a), spec)
}

/// Iterates the risk-sensitive Bellman evaluation operator from zero until
/// successive sweeps differ by at most `tol` in sup-norm.
pub fn risk_policy_evaluation(mdp: &TabularMDP, policy: &PolicyTable, spec: RiskSpec, tol: f64) -> Result<ValueTable> {
    evaluation_sweeps(mdp, policy, spec, tol, DEFAULT_MAX_SWEEPS).map(|(v, _)| v)
}

/// Same as [`risk_policy_evaluation`] but also returns the sup-norm change of
/// every sweep, and takes an explicit sweep cap.
pub fn evaluation_sweeps(
    mdp: &TabularMDP,
    policy: &PolicyTable,
    spec: RiskSpec,
    tol: f64,
    max_sweeps: usize,
) -> Result<(ValueTable, Vec<f64>)> {
    spec.validate()?;
    check_compatible(mdp, policy)?;
    if !(tol > 0.0) {
        return Err(invalid("tol", tol, "must be > 0"));
    }
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    let mut changes = Vec::new();
    for _ in 0..max_sweeps {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                policy
                    .row(s)
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(a, p)| p * q_value(mdp, &v, s, a, spec))
                    .sum()
            })
            .collect();
        let change = sup_change(&v, &next);
        v = next;
        changes.push(change);
        if change <= tol {
            return Ok((ValueTable { values: v }, changes));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_sweeps,
        residual: changes.last().copied().unwrap_or(f64::INFINITY),
    })
}

fn sup_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Risk-sensitive value iteration. Returns `V*` and the greedy deterministic
/// policy (lowest action index on ties).
pub fn risk_value_iteration(mdp: &TabularMDP, spec: RiskSpec, tol: f64) -> Result<(ValueTable, PolicyTable)> {
    spec.validate()?;
    if !(tol > 0.0) {
        return Err(invalid("tol", tol, "must be > 0"));
    }
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    let mut last = f64::INFINITY;
    for _ in 0..DEFAULT_MAX_SWEEPS {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| q_value(mdp, &v, s, a, spec))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        last = sup_change(&v, &next);
        v = next;
        if last <= tol {
            let actions = greedy(mdp, &v, spec);
            let policy = PolicyTable::deterministic(mdp.n_actions, &actions)?;
            return Ok((ValueTable { values: v }, policy));
        }
    }
    Err(Error::NonConvergence {
        iterations: DEFAULT_MAX_SWEEPS,
        residual: last,
    })
}

/// Greedy actions with respect to `values`; ties within 1e-12 go to the
/// lowest action index.
pub fn greedy(mdp: &TabularMDP, values: &[f64], spec: RiskSpec) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            let mut best = 0;
            let mut best_q = q_value(mdp, values, s, 0, spec);
            for a in 1..mdp.n_actions {
                let q = q_value(mdp, values, s, a, spec);
                if q > best_q + 1e-12 {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect()
}

const BRUTEFORCE_BUDGET: usize = 50_000_000;
const BRUTEFORCE_MAX_DEPTH: usize = 512;

/// Finite-horizon Markov dynamic risk from `s₀`, evaluated literally as the
/// nested expression `R₀ + ρ(γR₁ + ρ(γ²R₂ + …))` truncated after `horizon`
/// rewards (the tail is taken as zero).
///
/// This is an independent oracle for [`risk_policy_evaluation`]: discount
/// factors stay inside the nesting instead of being factored out, and the
/// one-step risks use primal formulas (Rockafellar–Uryasev for CVaR, the
/// Choquet integral for Wang) rather than the reweighting used by the
/// solvers. Sub-results are memoised per `(depth, state)`.
pub fn dynamic_risk_bruteforce(mdp: &TabularMDP, policy: &PolicyTable, spec: RiskSpec, horizon: usize) -> Result<f64> {
    spec.validate()?;
    check_compatible(mdp, policy)?;
    if horizon == 0 {
        return Err(Error::BudgetExceeded("horizon must be at least 1".into()));
    }
    let n = mdp.n_states;
    let work = horizon.saturating_mul(n).saturating_mul(mdp.n_actions).saturating_mul(n);
    if horizon > BRUTEFORCE_MAX_DEPTH || work > BRUTEFORCE_BUDGET {
        return Err(Error::BudgetExceeded(format!(
            "horizon {horizon} with {n} states needs {work} row evaluations"
        )));
    }
    let mut memo: Vec<Vec<Option<f64>>> = vec![vec![None; n]; horizon];
    Ok(nested(mdp, policy, spec, horizon, 0, mdp.initial_state, &mut memo))
}

fn nested(
    mdp: &TabularMDP,
    policy: &PolicyTable,
    spec: RiskSpec,
    horizon: usize,
    depth: usize,
    s: usize,
    memo: &mut Vec<Vec<Option<f64>>>,
) -> f64 {
    if let Some(v) = memo[depth][s] {
        return v;
    }
    let scale = mdp.discount.powi(depth as i32);
    let mut total = 0.0;
    for (a, &pa) in policy.row(s).iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        let mut term = scale * mdp.reward(s, a);
        if depth + 1 < horizon {
            let row = mdp.transition_row(s, a);
            let succ: Vec<(f64, f64)> = (0..mdp.n_states)
                .filter(|&t| row[t] > 0.0)
                .map(|t| (nested(mdp, policy, spec, horizon, depth + 1, t, memo), row[t]))
                .collect();
            term += primal_risk(&succ, spec);
        }
        total += pa * term;
    }
    memo[depth][s] = Some(total);
    total
}

fn primal_risk(outcomes: &[(f64, f64)], spec: RiskSpec) -> f64 {
    match spec {
        RiskSpec::Neutral => outcomes.iter().map(|(v, p)| v * p).sum(),
        RiskSpec::Cvar { alpha } => outcomes
            .iter()
            .map(|&(z, _)| z - outcomes.iter().map(|(v, p)| p * (z - v).max(0.0)).sum::<f64>() / alpha)
            .fold(f64::NEG_INFINITY, f64::max),
        RiskSpec::Wang { eta } => {
            let mut sorted = outcomes.to_vec();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
            // v₍₁₎ + Σ (v₍ᵢ₊₁₎ − v₍ᵢ₎)·(1 − g(F(v₍ᵢ₎)))
            let mut acc = sorted[0].0;
            let mut cum = 0.0;
            for w in sorted.windows(2) {
                cum += w[0].1;
                let g = if cum >= 1.0 {
                    1.0
                } else {
                    normal::cdf(normal::quantile(cum) + eta)
                };
                acc += (w[1].0 - w[0].0) * (1.0 - g);
            }
            acc
        }
    }
}

/// Uniform average of transition tensors and rewards of same-shaped models.
pub fn bayes_average_mdp(models: &[TabularMDP]) -> Result<TabularMDP> {
    let first = models
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no models to average".into()))?;
    for m in &models[1..] {
        if m.n_states != first.n_states
            || m.n_actions != first.n_actions
            || m.initial_state != first.initial_state
            || m.discount != first.discount
        {
            return Err(Error::ShapeMismatch("models disagree on shape, s0 or discount".into()));
        }
    }
    let k = models.len() as f64;
    let mut transition = vec![0.0; first.transition.len()];
    let mut reward = vec![0.0; first.reward.len()];
    for m in models {
        for (acc, p) in transition.iter_mut().zip(&m.transition) {
            *acc += p / k;
        }
        for (acc, r) in reward.iter_mut().zip(&m.reward) {
            *acc += r / k;
        }
    }
    TabularMDP::new(first.n_states, first.n_actions, transition, reward, first.initial_state, first.discount)
}
