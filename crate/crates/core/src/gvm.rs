//! Global value model pretraining and value-quality metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use numkit::{AdamConfig, Graph, OptimizerState, RealArray, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{PreferencePair, ScoredResponse};
use crate::env::{MdpEpisode, Token, Vocabulary};
use crate::error::{LabError, Result};
use crate::models::{batch_step, encode, Model, Role};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    MonteCarlo,
    /// `r_t + gamma * Q(t+1)` at the realized next action, with the bootstrap
    /// term held constant.
    BootstrapTd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub mode: TargetMode,
    pub gamma: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            mode: TargetMode::MonteCarlo,
            gamma: 1.0,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LabError::Config(format!(
                "discount {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// One regression episode for the value model.
#[derive(Debug, Clone, PartialEq)]
pub struct GvmExample {
    pub conditioning: Vec<Token>,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub token_rewards: Vec<f64>,
}

impl GvmExample {
    /// Terminal-reward example from a labeled record.
    pub fn from_record(r: &ScoredResponse, with_conditioning: bool) -> Result<Self> {
        let g = r
            .return_label
            .ok_or_else(|| LabError::Data("record has no return label".into()))?;
        if r.response.is_empty() {
            return Err(LabError::Data("record has an empty response".into()));
        }
        let mut token_rewards = vec![0.0; r.response.len()];
        *token_rewards.last_mut().unwrap() = g;
        Ok(Self {
            conditioning: if with_conditioning {
                r.conditioning_tokens()
            } else {
                Vec::new()
            },
            prompt: r.prompt.clone(),
            response: r.response.clone(),
            token_rewards,
        })
    }

    /// Tabular episode as tokens: the start state is the prompt and each
    /// action is a payload token.
    pub fn from_mdp(vocab: &Vocabulary, start: usize, ep: &MdpEpisode) -> Result<Self> {
        let (prompt, response) = mdp_tokens(vocab, start, &ep.actions)?;
        Ok(Self {
            conditioning: Vec::new(),
            prompt,
            response,
            token_rewards: ep.rewards.clone(),
        })
    }
}

/// Token encoding of a tabular start state and action sequence.
pub fn mdp_tokens(
    vocab: &Vocabulary,
    start: usize,
    actions: &[usize],
) -> Result<(Vec<Token>, Vec<Token>)> {
    let payload = vocab.payload_tokens();
    let tok = |i: usize| {
        payload.get(i).copied().ok_or_else(|| {
            LabError::Config(format!("vocabulary has no payload token for index {i}"))
        })
    };
    let prompt = vec![tok(start)?];
    let response = actions
        .iter()
        .map(|a| tok(*a))
        .collect::<Result<Vec<_>>>()?;
    Ok((prompt, response))
}

/// Discounted suffix sums of per-token rewards. With only a terminal reward
/// `r` this is `gamma^(T-t) * r` at 1-based step `t`.
pub fn mc_targets(token_rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; token_rewards.len()];
    let mut acc = 0.0;
    for t in (0..out.len()).rev() {
        acc = token_rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `r_t + gamma * Q(t+1)` with the model's own estimates; the last step's
/// target is its reward.
pub fn td_targets_from_values(token_rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    let t_len = token_rewards.len();
    (0..t_len)
        .map(|t| {
            if t + 1 < t_len {
                token_rewards[t] + gamma * values[t + 1]
            } else {
                token_rewards[t]
            }
        })
        .collect()
}

pub fn td_targets(model: &Model, ex: &GvmExample, gamma: f64) -> Result<Vec<f64>> {
    let q = model.value_estimates(&ex.conditioning, &ex.prompt, &ex.response)?;
    Ok(td_targets_from_values(&ex.token_rewards, &q, gamma))
}

/// Per-token mean squared error between the value head and the targets.
pub fn gvm_loss_node(
    g: &mut Graph,
    model: &Model,
    ex: &GvmExample,
    spec: &TargetSpec,
) -> Result<Var> {
    if ex.token_rewards.len() != ex.response.len() {
        return Err(LabError::Data(
            "token rewards do not match the response length".into(),
        ));
    }
    let enc = encode(
        &model.config.vocab,
        &ex.conditioning,
        &ex.prompt,
        &ex.response,
    );
    let q = model.value_rows(g, &enc)?;
    let target = match spec.mode {
        TargetMode::MonteCarlo => mc_targets(&ex.token_rewards, spec.gamma),
        TargetMode::BootstrapTd => {
            let frozen = g.detach(q)?;
            td_targets_from_values(&ex.token_rewards, g.value(frozen).data(), spec.gamma)
        }
    };
    let target = g.constant(RealArray::vector(target)?);
    Ok(g.mse(q, target)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GvmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for GvmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GvmTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Held-out pairwise accuracy keyed by aggregation name.
    pub heldout_accuracy: BTreeMap<String, f64>,
    pub optimizer_steps: usize,
    pub checkpoint: Option<String>,
}

/// Aggregations reported after training.
pub const REPORTED: [Aggregation; 7] = [
    Aggregation::Mean,
    Aggregation::Percentile(1),
    Aggregation::Percentile(5),
    Aggregation::Percentile(10),
    Aggregation::Percentile(90),
    Aggregation::Percentile(95),
    Aggregation::Percentile(99),
];

/// Minimizes the per-token value regression loss. `heldout` pairs, if given,
/// are scored after training under every reported aggregation.
pub fn train_gvm(
    model: &mut Model,
    examples: &[GvmExample],
    spec: &TargetSpec,
    cfg: &GvmTrainConfig,
    seed: u64,
    heldout: Option<&[PreferencePair]>,
) -> Result<GvmTrainReport> {
    model.expect_role(Role::Value)?;
    spec.validate()?;
    if examples.is_empty() {
        return Err(LabError::Data("value training set is empty".into()));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("gvm-train")]);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&GvmExample> = chunk.iter().map(|i| &examples[*i]).collect();
            let l = batch_step(
                model,
                &mut opt,
                &batch,
                Some(cfg.max_grad_norm),
                |g, m, ex| gvm_loss_node(g, m, ex, spec),
            )?;
            if !l.is_finite() {
                return Err(LabError::Divergence(format!("value loss {l}")));
            }
            sum += l * batch.len() as f64;
            steps += 1;
        }
        epoch_losses.push(sum / examples.len() as f64);
    }
    let mut heldout_accuracy = BTreeMap::new();
    if let Some(pairs) = heldout.filter(|p| !p.is_empty()) {
        for agg in REPORTED {
            heldout_accuracy.insert(agg.to_string(), pairwise_accuracy(model, pairs, agg)?);
        }
    }
    Ok(GvmTrainReport {
        epoch_losses,
        heldout_accuracy,
        optimizer_steps: steps,
        checkpoint: None,
    })
}

/// Mean loss over examples without updating anything.
pub fn evaluate_gvm_loss(model: &Model, examples: &[GvmExample], spec: &TargetSpec) -> Result<f64> {
    if examples.is_empty() {
        return Err(LabError::Data("value training set is empty".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let l = gvm_loss_node(&mut g, model, ex, spec)?;
        total += g.scalar(l);
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    /// Nearest-rank percentile, 1..=100.
    Percentile(u32),
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Percentile(k) => write!(f, "p{k}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(Aggregation::Mean);
        }
        s.strip_prefix('p')
            .and_then(|k| k.parse::<u32>().ok())
            .filter(|k| (1..=100).contains(k))
            .map(Aggregation::Percentile)
            .ok_or_else(|| LabError::Config(format!("unknown aggregation `{s}`")))
    }
}

impl Serialize for Aggregation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn aggregate(values: &[f64], agg: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::Data(
            "cannot aggregate an empty value sequence".into(),
        ));
    }
    Ok(match agg {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Percentile(k) => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let rank = ((k as f64 / 100.0) * n as f64).ceil() as usize;
            v[rank.clamp(1, n) - 1]
        }
    })
}

/// Fraction of pairs whose chosen response aggregates higher than the rejected
/// one under `values`; ties count one half.
pub fn pairwise_accuracy_with(
    pairs: &[PreferencePair],
    agg: Aggregation,
    mut values: impl FnMut(&[Token], &[Token]) -> Result<Vec<f64>>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LabError::Data("no pairs to score".into()));
    }
    let mut wins = 0.0;
    for p in pairs {
        let c = aggregate(&values(&p.prompt, &p.chosen)?, agg)?;
        let r = aggregate(&values(&p.prompt, &p.rejected)?, agg)?;
        wins += if c > r {
            1.0
        } else if c == r {
            0.5
        } else {
            0.0
        };
    }
    Ok(wins / pairs.len() as f64)
}

pub fn pairwise_accuracy(model: &Model, pairs: &[PreferencePair], agg: Aggregation) -> Result<f64> {
    pairwise_accuracy_with(pairs, agg, |p, r| model.value_estimates(&[], p, r))
}
