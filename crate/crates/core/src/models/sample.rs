use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::env::Token;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub greedy: bool,
    pub max_len: usize,
}

impl SamplerConfig {
    pub fn sampled(max_len: usize) -> Self {
        Self {
            temperature: 1.0,
            greedy: false,
            max_len,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        Self {
            temperature: 1.0,
            greedy: true,
            max_len,
        }
    }
}

/// Draws an index from unnormalized log-weights by inverse CDF.
fn draw<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|l| ((l - m) / temperature).exp())
        .collect();
    let z: f64 = w.iter().sum();
    let u = rng.random::<f64>() * z;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Generates a response token by token until end-of-sequence or
    /// `cfg.max_len`. Returns the response and the untempered log-probability
    /// of each emitted token.
    pub fn sample<R: Rng>(
        &self,
        conditioning: &[Token],
        prompt: &[Token],
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<(Vec<Token>, Vec<f64>)> {
        if cfg.max_len == 0 || !(cfg.temperature > 0.0) {
            return Err(LabError::Config(
                "sampler needs max_len >= 1 and temperature > 0".into(),
            ));
        }
        let eos = self.config.vocab.eos;
        let mut response = Vec::with_capacity(cfg.max_len);
        let mut logps = Vec::with_capacity(cfg.max_len);
        while response.len() < cfg.max_len {
            let lp = self.next_token_log_probs(conditioning, prompt, &response)?;
            let t = if cfg.greedy {
                argmax(&lp)
            } else {
                draw(&lp, cfg.temperature, rng)
            };
            response.push(t as Token);
            logps.push(lp[t]);
            if t as Token == eos {
                break;
            }
        }
        Ok((response, logps))
    }
}
