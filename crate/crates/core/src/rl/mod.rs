//! Policy optimization: frozen-value DVPO plus actor-critic PPO, ReMax and
//! GRPO baselines, sharing one rollout engine and one clipped objective.

mod advantage;
mod objective;
mod rollout;
mod trainer;

pub use advantage::{gae, group_advantages, remax_advantages, whiten};
pub use objective::{clipped_objective, ObjectiveStats};
pub use rollout::{
    dvpo_advantages, exact_kl_rows, policy_row_values, rollout, RolloutBatch, RolloutItem,
};
pub use trainer::{
    evaluate_greedy, mean_kl_to_reference, train_dvpo, train_grpo, train_policy,
    train_ppo_baseline, train_remax, LedgerTotals, RlOutcome, StepMetrics, KL_EVAL_SAMPLES,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dvpo,
    Ppo,
    Remax,
    Grpo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Dvpo,
        Algorithm::Ppo,
        Algorithm::Remax,
        Algorithm::Grpo,
    ];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Dvpo => "dvpo",
            Algorithm::Ppo => "ppo",
            Algorithm::Remax => "remax",
            Algorithm::Grpo => "grpo",
        })
    }
}

impl FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| LabError::Config(format!("unknown algorithm `{s}`")))
    }
}

fn d_clip() -> f64 {
    0.2
}
fn d_beta() -> f64 {
    0.05
}
fn d_kl_target() -> f64 {
    0.1
}
fn d_epochs() -> usize {
    4
}
fn d_n() -> usize {
    5
}
fn d_lambda() -> f64 {
    0.95
}
fn d_gamma() -> f64 {
    1.0
}
fn d_temp() -> f64 {
    1.0
}
fn d_prompts() -> usize {
    16
}
fn d_steps() -> usize {
    400
}
fn d_lr() -> f64 {
    5e-4
}
fn d_critic_lr() -> f64 {
    1e-3
}
fn d_grad() -> f64 {
    1.0
}
fn d_eval_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub algorithm: Algorithm,
    #[serde(default = "d_clip")]
    pub clip_eps: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_kl_target")]
    pub kl_target: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Responses per prompt for GRPO.
    #[serde(default = "d_n")]
    pub group_size: usize,
    #[serde(default)]
    pub whiten_advantages: bool,
    #[serde(default = "d_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_temp")]
    pub temperature: f64,
    #[serde(default = "d_prompts")]
    pub prompts_per_step: usize,
    /// Budget in optimizer steps.
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_critic_lr")]
    pub critic_lr: f64,
    #[serde(default = "d_grad")]
    pub max_grad_norm: f64,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RlConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            clip_eps: d_clip(),
            beta: d_beta(),
            kl_target: d_kl_target(),
            epochs: d_epochs(),
            group_size: d_n(),
            whiten_advantages: false,
            gae_lambda: d_lambda(),
            gamma: d_gamma(),
            temperature: d_temp(),
            prompts_per_step: d_prompts(),
            steps: d_steps(),
            lr: d_lr(),
            critic_lr: d_critic_lr(),
            max_grad_norm: d_grad(),
            eval_every: d_eval_every(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.kl_target > 0.0) {
            return bad("kl_target must be positive");
        }
        if self.epochs == 0 || self.prompts_per_step == 0 {
            return bad("epochs and prompts_per_step must be positive");
        }
        if self.algorithm == Algorithm::Grpo && self.group_size < 2 {
            return bad("GRPO needs group_size >= 2");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("gae_lambda and gamma must lie in [0, 1]");
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("temperature and learning rates must be positive");
        }
        Ok(())
    }

    /// Responses generated per prompt in one rollout.
    pub fn samples_per_prompt(&self) -> usize {
        match self.algorithm {
            Algorithm::Grpo => self.group_size,
            _ => 1,
        }
    }
}

/// Per-step resource counts in units of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub resident_trainable: usize,
    pub resident_frozen: usize,
    /// Generation passes per prompt.
    pub generation_multiplier: usize,
    /// Models backpropagated per optimizer step.
    pub backprop_multiplier: usize,
}

/// Analytic ledger row for the configured algorithm.
pub fn account_step(cfg: &RlConfig) -> Result<ComputeLedger> {
    cfg.validate()?;
    Ok(match cfg.algorithm {
        Algorithm::Dvpo => ComputeLedger {
            resident_trainable: 1,
            resident_frozen: 2,
            generation_multiplier: 1,
            backprop_multiplier: 1,
        },
        Algorithm::Ppo => ComputeLedger {
            resident_trainable: 2,
            resident_frozen: 2,
            generation_multiplier: 1,
            backprop_multiplier: 2,
        },
        Algorithm::Remax => ComputeLedger {
            resident_trainable: 1,
            resident_frozen: 2,
            generation_multiplier: 2,
            backprop_multiplier: 1,
        },
        Algorithm::Grpo => ComputeLedger {
            resident_trainable: 1,
            resident_frozen: 2,
            generation_multiplier: cfg.group_size,
            backprop_multiplier: 1,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_ratios() {
        let d = account_step(&RlConfig::new(Algorithm::Dvpo)).unwrap();
        let p = account_step(&RlConfig::new(Algorithm::Ppo)).unwrap();
        let r = account_step(&RlConfig::new(Algorithm::Remax)).unwrap();
        let g = account_step(&RlConfig::new(Algorithm::Grpo)).unwrap();
        assert_eq!((p.backprop_multiplier, d.backprop_multiplier), (2, 1));
        assert_eq!((g.generation_multiplier, d.generation_multiplier), (5, 1));
        assert_eq!(r.generation_multiplier, 2);
        assert_eq!(
            Algorithm::ALL.map(|a| account_step(&RlConfig::new(a)).unwrap().resident_trainable),
            [1, 2, 1, 1]
        );
    }

    #[test]
    fn config_validation() {
        let mut c = RlConfig::new(Algorithm::Grpo);
        c.group_size = 1;
        assert!(c.validate().is_err());
        let mut c = RlConfig::new(Algorithm::Dvpo);
        c.clip_eps = 0.0;
        assert!(c.validate().is_err());
        assert_eq!("grpo".parse::<Algorithm>().unwrap(), Algorithm::Grpo);
        assert!("dpo".parse::<Algorithm>().is_err());
    }
}
