//! Risk-averse model-based offline reinforcement learning.
//!
//! An ensemble of Gaussian dynamics models is fitted to a fixed dataset.
//! Short synthetic rollouts branch from dataset states; at every step the
//! model proposes `m` candidate successors, the critic scores them, and the
//! successor is drawn from a distribution perturbed towards low values by a
//! coherent risk measure (CVaR or Wang). An actor-critic trained on a mix of
//! real and synthetic transitions then optimises a dynamic risk objective
//! that is averse to both aleatoric noise and model disagreement.
//!
//! Module map:
//!
//! - [`risk`]: static risk measures and their adversarial perturbations.
//! - [`tabular`]: exact risk-sensitive dynamic programming and a brute-force
//!   nested-risk oracle.
//! - [`dynamics`]: the Gaussian model ensemble.
//! - [`rollout`]: perturbed synthetic rollouts and mixed batches.
//! - [`sac`]: soft actor-critic.
//! - [`env`]: currency exchange, the one-step illustrative MDP and random
//!   tabular MDPs.
//! - [`eval`]: static-CVaR evaluation and reports.
//! - [`experiment`]: configuration and the end-to-end commands.
//! - [`oracle`]: self-checking suites behind `riskmbrl oracle-tests`.

pub mod data;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod normal;
pub mod oracle;
pub mod risk;
pub mod rollout;
pub mod sac;
pub mod tabular;

pub use error::{Error, Result};
pub use risk::{DiscreteDistribution, RiskSpec};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/risk-measures.md")]
    mod risk_measures {}
    #[doc = include_str!("../../../book/src/tabular-oracle.md")]
    mod tabular_oracle {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/rollouts.md")]
    mod rollouts {}
    #[doc = include_str!("../../../book/src/currency.md")]
    mod currency {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
