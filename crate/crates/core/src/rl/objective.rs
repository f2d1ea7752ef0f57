use numkit::{Graph, RealArray, Var};
use serde::{Deserialize, Serialize};

use super::rollout::RolloutItem;
use crate::error::{LabError, Result};
use crate::models::{encode, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    /// `-mean_t min(r A, clip(r) A)`
    pub surrogate_loss: f64,
    /// Mean exact per-token KL to the reference policy.
    pub kl_mean: f64,
    /// Fraction of tokens where the clipped branch is the smaller one.
    pub clip_fraction: f64,
    pub loss: f64,
}

/// Token-mean clipped surrogate plus `beta` times the token-mean exact KL to
/// the reference rows stored in each item.
pub fn clipped_objective(
    g: &mut Graph,
    policy: &Model,
    items: &[RolloutItem],
    eps: f64,
    beta: f64,
) -> Result<(Var, ObjectiveStats)> {
    let n_tokens: usize = items.iter().map(|i| i.episode.len()).sum();
    if n_tokens == 0 {
        return Err(LabError::Data("objective over an empty batch".into()));
    }
    let mut surr: Option<Var> = None;
    let mut kl: Option<Var> = None;
    let mut clipped = 0usize;
    let acc = |g: &mut Graph, slot: &mut Option<Var>, v: Var| -> Result<()> {
        let s = g.sum(v)?;
        *slot = Some(match *slot {
            None => s,
            Some(prev) => g.add(prev, s)?,
        });
        Ok(())
    };
    for it in items {
        let ep = &it.episode;
        let t = ep.len();
        if it.advantages.len() != t || ep.behavior_logprobs.len() != t || it.ref_rows.len() != t {
            return Err(LabError::Data(
                "rollout item has mismatched per-token fields".into(),
            ));
        }
        let enc = encode(&policy.config.vocab, &[], &ep.prompt, &ep.response);
        let (rows, new_lp) = policy.policy_rows(g, &enc)?;
        let old = g.constant(RealArray::vector(ep.behavior_logprobs.clone())?);
        let adv = g.constant(RealArray::vector(it.advantages.clone())?);
        let diff = g.sub(new_lp, old)?;
        let ratio = g.exp(diff)?;
        let s1 = g.mul(ratio, adv)?;
        let rc = g.clip(ratio, 1.0 - eps, 1.0 + eps)?;
        let s2 = g.mul(rc, adv)?;
        clipped += g
            .value(s1)
            .data()
            .iter()
            .zip(g.value(s2).data())
            .filter(|(a, b)| b < a)
            .count();
        let m = g.min(s1, s2)?;
        acc(g, &mut surr, m)?;

        let v = g.value(rows).cols();
        let ref_data: Vec<f64> = it.ref_rows.iter().flatten().copied().collect();
        let refc = g.constant(RealArray::matrix(t, v, ref_data)?);
        let p = g.exp(rows)?;
        let d = g.sub(rows, refc)?;
        let pd = g.mul(p, d)?;
        let klt = g.row_sum(pd)?;
        acc(g, &mut kl, klt)?;
    }
    let inv = 1.0 / n_tokens as f64;
    let surr = g.scale(surr.unwrap(), -inv)?;
    let kl = g.scale(kl.unwrap(), inv)?;
    let kl_term = g.scale(kl, beta)?;
    let loss = g.add(surr, kl_term)?;
    let stats = ObjectiveStats {
        surrogate_loss: g.scalar(surr),
        kl_mean: g.scalar(kl),
        clip_fraction: clipped as f64 * inv,
        loss: g.scalar(loss),
    };
    Ok((loss, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Episode, LenRange, TaskKind, TokenTask, Vocabulary};
    use crate::models::{init_model, BackboneConfig, Role};
    use crate::rl::rollout::{policy_row_values, rollout};

    #[test]
    fn at_old_policy_surrogate_is_minus_mean_advantage() {
        let vocab = Vocabulary::with_payload(4);
        let task = TokenTask::new(TaskKind::Copy, vocab, LenRange::new(2, 3), 5);
        let pol = init_model(&BackboneConfig::new(vocab), Role::Policy, None).unwrap();
        let mut b = rollout(&pol, &pol, &task, &[vec![4, 5], vec![6, 7]], 3, 1.0, 0).unwrap();
        let mut all = Vec::new();
        for (k, it) in b.items.iter_mut().enumerate() {
            it.advantages = (0..it.episode.len())
                .map(|t| ((k * 7 + t) as f64 * 0.61).sin())
                .collect();
            all.extend(it.advantages.clone());
        }
        let mut g = Graph::new();
        let (_, st) = clipped_objective(&mut g, &pol, &b.items, 0.2, 0.05).unwrap();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((st.surrogate_loss + mean).abs() < 1e-12);
        assert_eq!(st.clip_fraction, 0.0);
        assert!(st.kl_mean.abs() < 1e-12);
    }

    #[test]
    fn clip_arithmetic() {
        // one token with old log-prob shifted so the ratio is 1.5
        let vocab = Vocabulary::with_payload(4);
        let pol = init_model(&BackboneConfig::new(vocab), Role::Policy, None).unwrap();
        let (p, y) = (vec![4], vec![5]);
        let lp = pol.policy_log_probs(&[], &p, &y).unwrap();
        let item = RolloutItem {
            episode: Episode::terminal(p.clone(), y.clone(), vec![lp[0] - 1.5f64.ln()], 1.0)
                .unwrap(),
            group: 0,
            ref_rows: policy_row_values(&pol, &p, &y).unwrap(),
            advantages: vec![1.0],
            returns: vec![],
        };
        let mut g = Graph::new();
        let (_, st) = clipped_objective(&mut g, &pol, &[item], 0.2, 0.0).unwrap();
        assert!((st.surrogate_loss + 1.2).abs() < 1e-12);
        assert_eq!(st.clip_fraction, 1.0);
    }
}
