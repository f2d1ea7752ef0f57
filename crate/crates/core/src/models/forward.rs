use numkit::{Graph, Var};

use super::{Model, Role, BACKBONE, HEAD};
use crate::env::{Token, Vocabulary};
use crate::error::{LabError, Result};

/// Model input: `conditioning ++ [BOS] ++ prompt ++ [SEP] ++ response`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub tokens: Vec<Token>,
    /// Index of the first response token.
    pub start: usize,
    pub response_len: usize,
}

pub fn encode(
    vocab: &Vocabulary,
    conditioning: &[Token],
    prompt: &[Token],
    response: &[Token],
) -> Encoded {
    let mut tokens = Vec::with_capacity(conditioning.len() + prompt.len() + response.len() + 2);
    tokens.extend_from_slice(conditioning);
    tokens.push(vocab.bos);
    tokens.extend_from_slice(prompt);
    tokens.push(vocab.sep);
    let start = tokens.len();
    tokens.extend_from_slice(response);
    Encoded {
        tokens,
        start,
        response_len: response.len(),
    }
}

impl Model {
    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(&self.params, name)?)
    }

    fn check_input(&self, tokens: &[Token]) -> Result<()> {
        self.config.vocab.check(tokens)?;
        if tokens.len() > self.config.max_seq_len {
            return Err(LabError::LengthOverflow {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Final hidden states `[n, dim]` for a token sequence.
    pub fn backbone(&self, g: &mut Graph, tokens: &[Token]) -> Result<Var> {
        self.check_input(tokens)?;
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        let pos: Vec<usize> = (0..n).collect();
        let tok = self.p(g, &format!("{BACKBONE}tok_emb"))?;
        let pe = self.p(g, &format!("{BACKBONE}pos_emb"))?;
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pe, &pos)?;
        let mut x = g.add(te, pe)?;
        for l in 0..self.config.layers {
            let pre = format!("{BACKBONE}layer{l}.");
            let h = self.layer_norm(g, x, &format!("{pre}ln1"))?;
            let q = self.linear(g, h, &format!("{pre}attn.q"))?;
            let k = self.linear(g, h, &format!("{pre}attn.k"))?;
            let v = self.linear(g, h, &format!("{pre}attn.v"))?;
            let a = g.causal_attention(q, k, v, self.config.heads)?;
            let a = self.linear(g, a, &format!("{pre}attn.o"))?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, x, &format!("{pre}ln2"))?;
            let h = self.linear(g, h, &format!("{pre}mlp.fc1"))?;
            let h = g.relu(h)?;
            let h = self.linear(g, h, &format!("{pre}mlp.fc2"))?;
            x = g.add(x, h)?;
        }
        self.layer_norm(g, x, &format!("{BACKBONE}ln_f"))
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        Ok(g.affine(x, w, Some(b))?)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.g"))?;
        let beta = self.p(g, &format!("{prefix}.b"))?;
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    /// Head outputs `[n, width]` for every position.
    fn head(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.linear(g, h, HEAD.trim_end_matches('.'))
    }

    fn scalar_rows(
        &self,
        g: &mut Graph,
        tokens: &[Token],
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let h = self.backbone(g, tokens)?;
        let h = g.rows(h, start, len)?;
        let out = self.head(g, h)?;
        Ok(g.reshape(out, &[len])?)
    }

    /// Next-token log-softmax rows `[T, V]` predicting each response token, and
    /// the selected log-probabilities `[T]`.
    pub fn policy_rows(&self, g: &mut Graph, enc: &Encoded) -> Result<(Var, Var)> {
        self.expect_role(Role::Policy)?;
        nonempty(enc)?;
        let h = self.backbone(g, &enc.tokens)?;
        let h = g.rows(h, enc.start - 1, enc.response_len)?;
        let logits = self.head(g, h)?;
        let logp = g.log_softmax(logits)?;
        let idx: Vec<usize> = enc.tokens[enc.start..]
            .iter()
            .map(|t| *t as usize)
            .collect();
        let picked = g.select(logp, &idx)?;
        Ok((logp, picked))
    }

    pub fn policy_log_probs(
        &self,
        conditioning: &[Token],
        prompt: &[Token],
        response: &[Token],
    ) -> Result<Vec<f64>> {
        let enc = encode(&self.config.vocab, conditioning, prompt, response);
        let mut g = Graph::new();
        let (_, picked) = self.policy_rows(&mut g, &enc)?;
        Ok(g.value(picked).data().to_vec())
    }

    /// Log-probabilities over the whole vocabulary for the token after `partial`.
    pub fn next_token_log_probs(
        &self,
        conditioning: &[Token],
        prompt: &[Token],
        partial: &[Token],
    ) -> Result<Vec<f64>> {
        self.expect_role(Role::Policy)?;
        let enc = encode(&self.config.vocab, conditioning, prompt, partial);
        let mut g = Graph::new();
        let h = self.backbone(&mut g, &enc.tokens)?;
        let last = g.rows(h, enc.tokens.len() - 1, 1)?;
        let logits = self.head(&mut g, last)?;
        let logp = g.log_softmax(logits)?;
        Ok(g.value(logp).data().to_vec())
    }

    /// Per-token action values `[T]`, read at each response token's position.
    pub fn value_rows(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        self.expect_role(Role::Value)?;
        nonempty(enc)?;
        self.scalar_rows(g, &enc.tokens, enc.start, enc.response_len)
    }

    /// State values `[T]` for the states preceding each response token.
    pub fn state_value_rows(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        self.expect_role(Role::Value)?;
        nonempty(enc)?;
        self.scalar_rows(g, &enc.tokens, enc.start - 1, enc.response_len)
    }

    pub fn value_estimates(
        &self,
        conditioning: &[Token],
        prompt: &[Token],
        response: &[Token],
    ) -> Result<Vec<f64>> {
        let enc = encode(&self.config.vocab, conditioning, prompt, response);
        let mut g = Graph::new();
        let v = self.value_rows(&mut g, &enc)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn state_values(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        let enc = encode(&self.config.vocab, &[], prompt, response);
        let mut g = Graph::new();
        let v = self.state_value_rows(&mut g, &enc)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Sequence score `[1]` read at the last non-pad position.
    pub fn reward_node(&self, g: &mut Graph, prompt: &[Token], response: &[Token]) -> Result<Var> {
        self.expect_role(Role::Reward)?;
        let pad = self.config.vocab.pad;
        let keep = response
            .iter()
            .rposition(|t| *t != pad)
            .map_or(0, |i| i + 1);
        let enc = encode(&self.config.vocab, &[], prompt, &response[..keep]);
        let last = enc.tokens.len() - 1;
        self.scalar_rows(g, &enc.tokens, last, 1)
    }

    pub fn scalar_reward(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let mut g = Graph::new();
        let r = self.reward_node(&mut g, prompt, response)?;
        Ok(g.scalar(r))
    }
}

fn nonempty(enc: &Encoded) -> Result<()> {
    if enc.response_len == 0 {
        Err(LabError::Data("response must be non-empty".into()))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, BackboneConfig};
    use numkit::RealArray;

    fn cfg(payload: usize) -> BackboneConfig {
        BackboneConfig::new(Vocabulary::with_payload(payload))
    }

    #[test]
    fn uniform_head_gives_uniform_log_probs() {
        let mut m = init_model(&cfg(4), Role::Policy, None).unwrap();
        let v = m.config.vocab.size;
        m.params
            .insert("head.w", RealArray::zeros(&[m.config.dim, v]));
        let lp = m.policy_log_probs(&[], &[4], &[4, 1, 3]).unwrap();
        for x in lp {
            assert!((x - (1.0 / v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_is_causal_and_normalized() {
        let m = init_model(&cfg(4), Role::Policy, None).unwrap();
        let a = m.policy_log_probs(&[], &[4, 5], &[6, 7, 1]).unwrap();
        let b = m.policy_log_probs(&[], &[4, 5], &[6, 4, 4]).unwrap();
        assert_eq!(a[0], b[0]);
        let lp = m.next_token_log_probs(&[], &[4, 5], &[6]).unwrap();
        assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(lp[7], a[1]);
    }

    #[test]
    fn value_and_reward_heads_start_at_zero_and_are_causal() {
        let pol = init_model(&cfg(4), Role::Policy, None).unwrap();
        let mut v = init_model(&cfg(4), Role::Value, Some(&pol)).unwrap();
        assert_eq!(
            v.value_estimates(&[], &[4], &[5, 6, 1]).unwrap(),
            vec![0.0; 3]
        );
        v.params.insert("head.w", RealArray::filled(&[32, 1], 0.1));
        let a = v.value_estimates(&[], &[4], &[5, 6, 1]).unwrap();
        let b = v.value_estimates(&[], &[4], &[5, 6, 7]).unwrap();
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
        let mut r = init_model(&cfg(4), Role::Reward, Some(&pol)).unwrap();
        assert_eq!(r.scalar_reward(&[4], &[5, 1]).unwrap(), 0.0);
        r.params.insert("head.w", RealArray::filled(&[32, 1], 0.1));
        let pad = r.config.vocab.pad;
        assert_eq!(
            r.scalar_reward(&[4], &[5, 1]).unwrap(),
            r.scalar_reward(&[4], &[5, 1, pad, pad]).unwrap()
        );
    }

    #[test]
    fn rejects_overflow_and_bad_tokens() {
        let mut c = cfg(4);
        c.max_seq_len = 6;
        let m = init_model(&c, Role::Policy, None).unwrap();
        assert!(matches!(
            m.policy_log_probs(&[], &[4, 5, 6], &[4, 5]),
            Err(LabError::LengthOverflow { .. })
        ));
        assert!(matches!(
            m.policy_log_probs(&[], &[40], &[4]),
            Err(LabError::TokenOutOfVocab { .. })
        ));
        assert!(matches!(
            m.value_estimates(&[], &[4], &[4]),
            Err(LabError::RoleMismatch { .. })
        ));
    }
}
