use numkit::Graph;

use super::advantage::whiten;
use crate::env::{Episode, Token, TokenTask};
use crate::error::{LabError, Result};
use crate::models::{encode, Model, Role, SamplerConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutItem {
    pub episode: Episode,
    /// Index of the prompt within the batch.
    pub group: usize,
    /// Reference-policy log-probabilities over the vocabulary, one row per token.
    pub ref_rows: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    /// Critic regression targets; empty unless an online critic is trained.
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub items: Vec<RolloutItem>,
    pub prompts: usize,
    pub generation_passes: usize,
}

impl RolloutBatch {
    pub fn mean_reward(&self) -> f64 {
        self.items.iter().map(|i| i.episode.reward).sum::<f64>() / self.items.len().max(1) as f64
    }

    pub fn token_count(&self) -> usize {
        self.items.iter().map(|i| i.episode.len()).sum()
    }
}

/// Full log-softmax rows `[T][V]` of `model` along a response.
pub fn policy_row_values(
    model: &Model,
    prompt: &[Token],
    response: &[Token],
) -> Result<Vec<Vec<f64>>> {
    let enc = encode(&model.config.vocab, &[], prompt, response);
    let mut g = Graph::new();
    let (rows, _) = model.policy_rows(&mut g, &enc)?;
    let a = g.value(rows);
    Ok((0..a.rows()).map(|r| a.row(r).to_vec()).collect())
}

/// Per-token `KL(p || q)` between two sets of log-probability rows.
pub fn exact_kl_rows(logp: &[Vec<f64>], logq: &[Vec<f64>]) -> Vec<f64> {
    logp.iter()
        .zip(logq)
        .map(|(p, q)| p.iter().zip(q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum())
        .collect()
}

/// Samples `per_prompt` responses for each prompt, recording behavior and
/// reference log-probabilities. Episodes carry the ground-truth reward.
pub fn rollout(
    policy: &Model,
    reference: &Model,
    task: &TokenTask,
    prompts: &[Vec<Token>],
    per_prompt: usize,
    temperature: f64,
    seed: u64,
) -> Result<RolloutBatch> {
    if prompts.is_empty() || per_prompt == 0 {
        return Err(LabError::Data(
            "rollout needs at least one prompt and one sample".into(),
        ));
    }
    policy.expect_role(Role::Policy)?;
    reference.expect_role(Role::Policy)?;
    let cfg = SamplerConfig {
        temperature,
        greedy: false,
        max_len: task.max_response_len,
    };
    let mut items = Vec::with_capacity(prompts.len() * per_prompt);
    let mut passes = 0;
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..per_prompt {
            let mut rng = seed::rng_for(seed, &[seed::tag("rollout"), i as u64, j as u64]);
            let (response, logps) = policy.sample(&[], p, &cfg, &mut rng)?;
            passes += 1;
            let ref_rows = policy_row_values(reference, p, &response)?;
            let episode = Episode::scored(task, p.clone(), response, logps)?;
            items.push(RolloutItem {
                episode,
                group: i,
                ref_rows,
                advantages: Vec::new(),
                returns: Vec::new(),
            });
        }
    }
    Ok(RolloutBatch {
        items,
        prompts: prompts.len(),
        generation_passes: passes,
    })
}

/// Advantage of each token is the frozen value model's estimate for it.
pub fn dvpo_advantages(gvm: &Model, batch: &mut RolloutBatch, whiten_flag: bool) -> Result<()> {
    gvm.expect_role(Role::Value)?;
    if !gvm.is_frozen() {
        return Err(LabError::NotFrozen);
    }
    for it in batch.items.iter_mut() {
        it.advantages = gvm.value_estimates(&[], &it.episode.prompt, &it.episode.response)?;
    }
    if whiten_flag {
        let mut all: Vec<Vec<f64>> = batch.items.iter().map(|i| i.advantages.clone()).collect();
        whiten(&mut all);
        for (it, a) in batch.items.iter_mut().zip(all) {
            it.advantages = a;
        }
    }
    Ok(())
}
