use numkit::{AdamConfig, Graph, OptimizerState, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{encode, Model, Role};
use crate::dataset::PreferencePair;
use crate::env::TokenTask;
use crate::error::{LabError, Result};
use crate::seed;

/// One optimizer update on the mean of per-item losses built by `f`.
/// Returns the batch loss before the update.
pub fn batch_step<T>(
    model: &mut Model,
    opt: &mut OptimizerState,
    items: &[T],
    max_grad_norm: Option<f64>,
    mut f: impl FnMut(&mut Graph, &Model, &T) -> Result<Var>,
) -> Result<f64> {
    model.ensure_trainable()?;
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for it in items {
        let l = f(&mut g, model, it)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| LabError::Data("empty training batch".into()))?;
    let loss = g.scale(total, 1.0 / items.len() as f64)?;
    let mut grads = g.backward(loss)?;
    if let Some(c) = max_grad_norm {
        grads.clip_global_norm(c);
    }
    opt.step(&mut model.params, &grads)?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Probability that a demonstration repeats its last token before the
    /// end-of-sequence token.
    #[serde(default)]
    pub demo_noise: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
            max_grad_norm: 1.0,
            demo_noise: 0.0,
        }
    }
}

/// Supervised next-token training on task targets followed by end-of-sequence.
/// `on_step(step, model)` runs after every update, for stage checkpoints.
pub fn train_sft(
    policy: &mut Model,
    task: &TokenTask,
    cfg: &SftConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Vec<f64>> {
    policy.expect_role(Role::Policy)?;
    if !(0.0..=1.0).contains(&cfg.demo_noise) {
        return Err(LabError::Config("demo_noise must lie in [0, 1]".into()));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("sft")]);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| {
                let p = task.sample_prompt_with(&mut rng);
                let mut y = task.target(&p);
                if cfg.demo_noise > 0.0 && rng.random_bool(cfg.demo_noise) {
                    y.extend(y.last().copied());
                }
                y.push(task.vocab.eos);
                (p, y)
            })
            .collect();
        let loss = batch_step(
            policy,
            &mut opt,
            &batch,
            Some(cfg.max_grad_norm),
            |g, m, (p, y)| {
                let enc = encode(&m.config.vocab, &[], p, y);
                let (_, picked) = m.policy_rows(g, &enc)?;
                let mean = g.mean(picked)?;
                Ok(g.scale(mean, -1.0)?)
            },
        )?;
        losses.push(loss);
        on_step(step, policy)?;
    }
    Ok(losses)
}

fn bt_node(g: &mut Graph, model: &Model, pair: &PreferencePair) -> Result<Var> {
    let c = model.reward_node(g, &pair.prompt, &pair.chosen)?;
    let r = model.reward_node(g, &pair.prompt, &pair.rejected)?;
    let d = g.sub(c, r)?;
    let ls = g.log_sigmoid(d)?;
    Ok(g.scale(ls, -1.0)?)
}

/// Mean of `-log sigmoid(score(chosen) - score(rejected))`.
pub fn bt_pair_loss(model: &Model, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LabError::Data("no preference pairs".into()));
    }
    let mut g = Graph::new();
    let mut total = 0.0;
    for p in pairs {
        let l = bt_node(&mut g, model, p)?;
        total += g.scalar(l);
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 1e-3,
            max_grad_norm: 1.0,
        }
    }
}

/// Pairwise logistic training of a reward model. Returns the mean loss per epoch.
pub fn train_reward_model(
    model: &mut Model,
    pairs: &[PreferencePair],
    cfg: &RewardTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    model.expect_role(Role::Reward)?;
    if pairs.is_empty() {
        return Err(LabError::Data("no preference pairs".into()));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("reward-train")]);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut out = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|i| &pairs[*i]).collect();
            let l = batch_step(
                model,
                &mut opt,
                &batch,
                Some(cfg.max_grad_norm),
                |g, m, p| bt_node(g, m, p),
            )?;
            sum += l * batch.len() as f64;
            n += batch.len();
        }
        out.push(sum / n as f64);
    }
    Ok(out)
}
