use numkit::{AdamConfig, Graph, OptimizerState, RealArray, Var};
use serde::{Deserialize, Serialize};

use super::advantage::{gae, group_advantages, remax_advantages, whiten};
use super::objective::clipped_objective;
use super::rollout::{dvpo_advantages, exact_kl_rows, policy_row_values, rollout, RolloutBatch};
use super::{Algorithm, RlConfig};
use crate::env::{Token, TokenTask};
use crate::error::{LabError, Result};
use crate::models::{encode, init_model, Model, Role, SamplerConfig};
use crate::seed;

/// Responses per evaluation prompt when measuring the final KL.
pub const KL_EVAL_SAMPLES: usize = 8;

/// Summed ledger counts over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub optimizer_steps: usize,
    pub generation_passes: usize,
    pub prompts: usize,
    pub backprop_passes: usize,
}

impl LedgerTotals {
    /// Generation passes per prompt.
    pub fn generation_per_prompt(&self) -> f64 {
        self.generation_passes as f64 / self.prompts.max(1) as f64
    }

    /// Models backpropagated per optimizer step.
    pub fn backprop_per_step(&self) -> f64 {
        self.backprop_passes as f64 / self.optimizer_steps.max(1) as f64
    }
}

/// One record per optimizer step. Generation and prompt counts are those
/// incurred since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub iteration: usize,
    pub epoch: usize,
    pub algorithm: Algorithm,
    /// Mean ground-truth reward of the rollout batch.
    pub mean_reward: f64,
    pub surrogate_loss: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub value_loss: Option<f64>,
    pub generation_passes: usize,
    pub prompts: usize,
    pub backprop_passes: usize,
    pub resident_trainable: usize,
    pub resident_frozen: usize,
    /// Greedy ground-truth reward on the evaluation prompts after this step.
    pub eval_reward: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub policy: Model,
    pub critic: Option<Model>,
    pub metrics: Vec<StepMetrics>,
    pub initial_eval: f64,
    pub final_eval: f64,
    /// Mean exact per-token KL to the reference on fresh samples after training.
    pub final_kl: f64,
    /// Batches whose epochs were cut short by the KL target.
    pub early_stops: usize,
    pub iterations: usize,
}

impl RlOutcome {
    pub fn optimizer_steps(&self) -> usize {
        self.metrics.len()
    }

    pub fn ledger_totals(&self) -> LedgerTotals {
        LedgerTotals {
            optimizer_steps: self.metrics.len(),
            generation_passes: self.metrics.iter().map(|m| m.generation_passes).sum(),
            prompts: self.metrics.iter().map(|m| m.prompts).sum(),
            backprop_passes: self.metrics.iter().map(|m| m.backprop_passes).sum(),
        }
    }

    /// `(step, eval_reward)` points, starting with step 0.
    pub fn eval_curve(&self) -> Vec<(usize, f64)> {
        std::iter::once((0, self.initial_eval))
            .chain(
                self.metrics
                    .iter()
                    .filter_map(|m| m.eval_reward.map(|r| (m.step, r))),
            )
            .collect()
    }
}

/// Mean ground-truth reward of greedy responses.
pub fn evaluate_greedy(policy: &Model, task: &TokenTask, prompts: &[Vec<Token>]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(LabError::Data("no evaluation prompts".into()));
    }
    let cfg = SamplerConfig::greedy(task.max_response_len);
    let mut rng = seed::rng(0);
    let mut total = 0.0;
    for p in prompts {
        let (y, _) = policy.sample(&[], p, &cfg, &mut rng)?;
        total += task.ground_truth_reward(p, &y)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Token-mean exact KL from `policy` to `reference` along sampled responses.
pub fn mean_kl_to_reference(
    policy: &Model,
    reference: &Model,
    task: &TokenTask,
    prompts: &[Vec<Token>],
    per_prompt: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = SamplerConfig::sampled(task.max_response_len);
    let (mut total, mut n) = (0.0, 0usize);
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..per_prompt {
            let mut rng = seed::rng_for(seed, &[seed::tag("kl-eval"), i as u64, j as u64]);
            let (y, _) = policy.sample(&[], p, &cfg, &mut rng)?;
            let kl = exact_kl_rows(
                &policy_row_values(policy, p, &y)?,
                &policy_row_values(reference, p, &y)?,
            );
            total += kl.iter().sum::<f64>();
            n += kl.len();
        }
    }
    Ok(total / n.max(1) as f64)
}

fn critic_loss_node(g: &mut Graph, critic: &Model, batch: &RolloutBatch) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut n = 0;
    for it in &batch.items {
        let enc = encode(
            &critic.config.vocab,
            &[],
            &it.episode.prompt,
            &it.episode.response,
        );
        let v = critic.state_value_rows(g, &enc)?;
        let target = g.constant(RealArray::vector(it.returns.clone())?);
        let d = g.sub(v, target)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq)?;
        n += it.returns.len();
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / n as f64)?)
}

struct Counters {
    generation_passes: usize,
    prompts: usize,
}

fn fill_advantages(
    cfg: &RlConfig,
    task: &TokenTask,
    policy: &Model,
    scorer: &Model,
    critic: Option<&Model>,
    batch: &mut RolloutBatch,
    counters: &mut Counters,
) -> Result<()> {
    match cfg.algorithm {
        Algorithm::Dvpo => return dvpo_advantages(scorer, batch, cfg.whiten_advantages),
        Algorithm::Remax => {
            let greedy_cfg = SamplerConfig::greedy(task.max_response_len);
            let mut rng = seed::rng(0);
            for it in batch.items.iter_mut() {
                let (g, _) = policy.sample(&[], &it.episode.prompt, &greedy_cfg, &mut rng)?;
                counters.generation_passes += 1;
                let rs = scorer.scalar_reward(&it.episode.prompt, &it.episode.response)?;
                let rg = scorer.scalar_reward(&it.episode.prompt, &g)?;
                let a = remax_advantages(&[rs], &[rg])[0];
                it.advantages = vec![a; it.episode.len()];
            }
        }
        Algorithm::Grpo => {
            let scores = batch
                .items
                .iter()
                .map(|it| scorer.scalar_reward(&it.episode.prompt, &it.episode.response))
                .collect::<Result<Vec<_>>>()?;
            for grp in 0..batch.prompts {
                let idx: Vec<usize> = (0..batch.items.len())
                    .filter(|i| batch.items[*i].group == grp)
                    .collect();
                let adv = group_advantages(&idx.iter().map(|i| scores[*i]).collect::<Vec<_>>());
                for (i, a) in idx.into_iter().zip(adv) {
                    let t = batch.items[i].episode.len();
                    batch.items[i].advantages = vec![a; t];
                }
            }
        }
        Algorithm::Ppo => {
            let critic = critic.expect("ppo trains a critic");
            for it in batch.items.iter_mut() {
                let (p, y) = (&it.episode.prompt, &it.episode.response);
                let kl = exact_kl_rows(&policy_row_values(policy, p, y)?, &it.ref_rows);
                let mut rewards: Vec<f64> = kl.iter().map(|k| -cfg.beta * k).collect();
                *rewards.last_mut().unwrap() += scorer.scalar_reward(p, y)?;
                let values = critic.state_values(p, y)?;
                let (adv, ret) = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda);
                it.advantages = adv;
                it.returns = ret;
            }
        }
    }
    if cfg.whiten_advantages {
        let mut all: Vec<Vec<f64>> = batch.items.iter().map(|i| i.advantages.clone()).collect();
        whiten(&mut all);
        for (it, a) in batch.items.iter_mut().zip(all) {
            it.advantages = a;
        }
    }
    Ok(())
}

/// Shared training loop. `scorer` is the frozen value model for DVPO and the
/// reward model otherwise. Training stops after `cfg.steps` optimizer steps or
/// `cfg.steps` rollout batches, whichever comes first.
pub fn train_policy(
    cfg: &RlConfig,
    task: &TokenTask,
    init: &Model,
    reference: &Model,
    scorer: &Model,
    eval_prompts: &[Vec<Token>],
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    task.validate()?;
    init.expect_role(Role::Policy)?;
    reference.expect_role(Role::Policy)?;
    match cfg.algorithm {
        Algorithm::Dvpo => scorer.expect_role(Role::Value)?,
        _ => scorer.expect_role(Role::Reward)?,
    }
    let mut policy = init.clone();
    let mut critic = match cfg.algorithm {
        Algorithm::Ppo => {
            // critic starts as a copy of the reward model, scalar head included
            let mut c = init_model(&scorer.config, Role::Value, Some(scorer))?;
            c.params = scorer.params.clone();
            Some(c)
        }
        _ => None,
    };
    let resident_trainable = 1 + critic.is_some() as usize;
    let resident_frozen = [reference, scorer].len();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr));
    let mut critic_opt = OptimizerState::new(AdamConfig::with_lr(cfg.critic_lr));
    let beta_loss = if cfg.algorithm == Algorithm::Ppo {
        0.0
    } else {
        cfg.beta
    };

    let initial_eval = evaluate_greedy(&policy, task, eval_prompts)?;
    let mut last_eval = initial_eval;
    let mut prompt_rng = seed::rng_for(cfg.seed, &[seed::tag("rl-prompts")]);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut counters = Counters {
        generation_passes: 0,
        prompts: 0,
    };
    let mut early_stops = 0;
    let mut iteration = 0;
    while metrics.len() < cfg.steps && iteration < cfg.steps {
        iteration += 1;
        let prompts: Vec<Vec<Token>> = (0..cfg.prompts_per_step)
            .map(|_| task.sample_prompt_with(&mut prompt_rng))
            .collect();
        let roll_seed = seed::derive(cfg.seed, &[seed::tag("rl-rollout"), iteration as u64]);
        let mut batch = rollout(
            &policy,
            reference,
            task,
            &prompts,
            cfg.samples_per_prompt(),
            cfg.temperature,
            roll_seed,
        )?;
        counters.generation_passes += batch.generation_passes;
        counters.prompts += batch.prompts;
        fill_advantages(
            cfg,
            task,
            &policy,
            scorer,
            critic.as_ref(),
            &mut batch,
            &mut counters,
        )?;
        let mean_reward = batch.mean_reward();

        for epoch in 1..=cfg.epochs {
            if metrics.len() == cfg.steps {
                break;
            }
            let mut g = Graph::new();
            let (loss, stats) =
                clipped_objective(&mut g, &policy, &batch.items, cfg.clip_eps, beta_loss)?;
            if stats.kl_mean > cfg.kl_target {
                early_stops += 1;
                break;
            }
            if !stats.loss.is_finite() {
                return Err(LabError::Divergence(format!("policy loss {}", stats.loss)));
            }
            let mut grads = g.backward(loss)?;
            grads.clip_global_norm(cfg.max_grad_norm);
            opt.step(&mut policy.params, &grads)?;
            let mut backprop_passes = 1;
            let mut value_loss = None;
            if let Some(c) = critic.as_mut() {
                let mut cg = Graph::new();
                let l = critic_loss_node(&mut cg, c, &batch)?;
                let mut cgrads = cg.backward(l)?;
                cgrads.clip_global_norm(cfg.max_grad_norm);
                critic_opt.step(&mut c.params, &cgrads)?;
                backprop_passes += 1;
                value_loss = Some(cg.scalar(l));
            }
            let step = metrics.len() + 1;
            let eval_reward =
                if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps {
                    last_eval = evaluate_greedy(&policy, task, eval_prompts)?;
                    Some(last_eval)
                } else {
                    None
                };
            let m = StepMetrics {
                step,
                iteration,
                epoch,
                algorithm: cfg.algorithm,
                mean_reward,
                surrogate_loss: stats.surrogate_loss,
                kl_mean: stats.kl_mean,
                clip_fraction: stats.clip_fraction,
                value_loss,
                generation_passes: std::mem::take(&mut counters.generation_passes),
                prompts: std::mem::take(&mut counters.prompts),
                backprop_passes,
                resident_trainable,
                resident_frozen,
                eval_reward,
            };
            on_step(&m)?;
            metrics.push(m);
        }
    }
    let final_eval = match metrics.last() {
        Some(m) if m.eval_reward.is_some() => last_eval,
        _ => evaluate_greedy(&policy, task, eval_prompts)?,
    };
    let final_kl = mean_kl_to_reference(
        &policy,
        reference,
        task,
        eval_prompts,
        KL_EVAL_SAMPLES,
        seed::derive(cfg.seed, &[seed::tag("final-kl")]),
    )?;
    Ok(RlOutcome {
        policy,
        critic,
        metrics,
        initial_eval,
        final_eval,
        final_kl,
        early_stops,
        iterations: iteration,
    })
}

fn expect_algorithm(cfg: &RlConfig, a: Algorithm) -> Result<()> {
    if cfg.algorithm != a {
        return Err(LabError::Config(format!(
            "config selects {}, not {a}",
            cfg.algorithm
        )));
    }
    Ok(())
}

/// DVPO against a frozen value model, whose parameters are checked unchanged.
pub fn train_dvpo(
    cfg: &RlConfig,
    task: &TokenTask,
    init: &Model,
    reference: &Model,
    gvm: &Model,
    eval_prompts: &[Vec<Token>],
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RlOutcome> {
    expect_algorithm(cfg, Algorithm::Dvpo)?;
    gvm.expect_role(Role::Value)?;
    if !gvm.is_frozen() {
        return Err(LabError::NotFrozen);
    }
    let before = gvm.fingerprint();
    let out = train_policy(cfg, task, init, reference, gvm, eval_prompts, on_step)?;
    if gvm.fingerprint() != before {
        return Err(LabError::Data(
            "frozen value model changed during training".into(),
        ));
    }
    Ok(out)
}

pub fn train_ppo_baseline(
    cfg: &RlConfig,
    task: &TokenTask,
    init: &Model,
    reference: &Model,
    reward_model: &Model,
    eval_prompts: &[Vec<Token>],
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RlOutcome> {
    expect_algorithm(cfg, Algorithm::Ppo)?;
    train_policy(
        cfg,
        task,
        init,
        reference,
        reward_model,
        eval_prompts,
        on_step,
    )
}

pub fn train_remax(
    cfg: &RlConfig,
    task: &TokenTask,
    init: &Model,
    reference: &Model,
    reward_model: &Model,
    eval_prompts: &[Vec<Token>],
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RlOutcome> {
    expect_algorithm(cfg, Algorithm::Remax)?;
    train_policy(
        cfg,
        task,
        init,
        reference,
        reward_model,
        eval_prompts,
        on_step,
    )
}

pub fn train_grpo(
    cfg: &RlConfig,
    task: &TokenTask,
    init: &Model,
    reference: &Model,
    reward_model: &Model,
    eval_prompts: &[Vec<Token>],
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RlOutcome> {
    expect_algorithm(cfg, Algorithm::Grpo)?;
    train_policy(
        cfg,
        task,
        init,
        reference,
        reward_model,
        eval_prompts,
        on_step,
    )
}
