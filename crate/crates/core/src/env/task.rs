use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Token, Vocabulary};
use crate::error::{LabError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Repeat the prompt.
    Copy,
    /// Emit the prompt tokens in ascending order.
    Sort,
    /// Emit one payload token encoding the parity of the prompt's payload sum.
    ParitySum,
    /// Continue the periodic pattern of the prompt for a fixed number of tokens.
    PatternComplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }
}

fn default_continuation() -> usize {
    3
}

/// A token-generation task with a deterministic ground-truth reward in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTask {
    pub kind: TaskKind,
    pub vocab: Vocabulary,
    pub prompt_len: LenRange,
    /// Hard cap on response length, end-of-sequence included.
    pub max_response_len: usize,
    /// Tokens to produce for `pattern-complete`.
    #[serde(default = "default_continuation")]
    pub continuation: usize,
    /// Spread the terminal reward over tokens as prefix-credit increments.
    #[serde(default)]
    pub intermediate_shaping: bool,
}

impl TokenTask {
    pub fn new(
        kind: TaskKind,
        vocab: Vocabulary,
        prompt_len: LenRange,
        max_response_len: usize,
    ) -> Self {
        Self {
            kind,
            vocab,
            prompt_len,
            max_response_len,
            continuation: default_continuation(),
            intermediate_shaping: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.prompt_len.min == 0 || self.prompt_len.min > self.prompt_len.max {
            return Err(LabError::Config(format!(
                "prompt length range [{}, {}] is invalid",
                self.prompt_len.min, self.prompt_len.max
            )));
        }
        if self.max_response_len == 0 {
            return Err(LabError::Config("max_response_len must be positive".into()));
        }
        if self.kind == TaskKind::PatternComplete && self.continuation == 0 {
            return Err(LabError::Config(
                "pattern-complete needs continuation >= 1".into(),
            ));
        }
        if self.kind == TaskKind::ParitySum && self.vocab.payload_tokens().len() < 2 {
            return Err(LabError::Config(
                "parity-sum needs at least two payload tokens".into(),
            ));
        }
        let longest_target = match self.kind {
            TaskKind::Copy | TaskKind::Sort => self.prompt_len.max,
            TaskKind::ParitySum => 1,
            TaskKind::PatternComplete => self.continuation,
        };
        if longest_target + 1 > self.max_response_len {
            return Err(LabError::Config(format!(
                "max_response_len {} cannot hold a {longest_target}-token answer plus end-of-sequence",
                self.max_response_len
            )));
        }
        Ok(())
    }

    pub fn sample_prompt(&self, seed: u64) -> Vec<Token> {
        self.sample_prompt_with(&mut seed::rng(seed))
    }

    pub fn sample_prompt_with<R: Rng>(&self, rng: &mut R) -> Vec<Token> {
        let payload = self.vocab.payload_tokens();
        let len = rng.random_range(self.prompt_len.min..=self.prompt_len.max);
        match self.kind {
            TaskKind::PatternComplete => {
                let period = rng.random_range(2..=3usize).min(len);
                let base: Vec<Token> = (0..period)
                    .map(|_| payload[rng.random_range(0..payload.len())])
                    .collect();
                (0..len).map(|i| base[i % period]).collect()
            }
            _ => (0..len)
                .map(|_| payload[rng.random_range(0..payload.len())])
                .collect(),
        }
    }

    /// The correct answer for `prompt`, without the end-of-sequence token.
    pub fn target(&self, prompt: &[Token]) -> Vec<Token> {
        match self.kind {
            TaskKind::Copy => prompt.to_vec(),
            TaskKind::Sort => {
                let mut s = prompt.to_vec();
                s.sort_unstable();
                s
            }
            TaskKind::ParitySum => {
                let payload = self.vocab.payload_tokens();
                let first = payload[0];
                let sum: u64 = prompt
                    .iter()
                    .map(|t| (t.saturating_sub(first)) as u64)
                    .sum();
                vec![payload[(sum % 2) as usize]]
            }
            TaskKind::PatternComplete => {
                let p = minimal_period(prompt);
                (0..self.continuation)
                    .map(|j| prompt[(prompt.len() + j) % p])
                    .collect()
            }
        }
    }

    /// Ground-truth score: `2 * prefix / max(|target|, |answer|) - 1`, where
    /// `answer` is the response up to its first end-of-sequence token and
    /// `prefix` is the longest common prefix with the target.
    pub fn ground_truth_reward(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        if response.is_empty() {
            return Err(LabError::Data("response must be non-empty".into()));
        }
        self.vocab.check(prompt)?;
        self.vocab.check(response)?;
        Ok(self.score(prompt, response))
    }

    fn score(&self, prompt: &[Token], response: &[Token]) -> f64 {
        let target = self.target(prompt);
        let answer = match response.iter().position(|t| *t == self.vocab.eos) {
            Some(i) => &response[..i],
            None => response,
        };
        let prefix = target
            .iter()
            .zip(answer)
            .take_while(|(a, b)| a == b)
            .count();
        let denom = target.len().max(answer.len()).max(1);
        2.0 * prefix as f64 / denom as f64 - 1.0
    }

    /// Per-token rewards for a response: all zero except the final entry unless
    /// intermediate shaping is enabled.
    pub fn token_rewards(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        let r = self.ground_truth_reward(prompt, response)?;
        let t = response.len();
        if !self.intermediate_shaping {
            let mut out = vec![0.0; t];
            out[t - 1] = r;
            return Ok(out);
        }
        let mut out = Vec::with_capacity(t);
        let mut prev = 0.0;
        for i in 1..=t {
            let f = if i == t {
                r
            } else {
                self.score(prompt, &response[..i])
            };
            out.push(f - prev);
            prev = f;
        }
        Ok(out)
    }

    pub fn max_reward(&self) -> f64 {
        1.0
    }
}

/// Smallest p with `s[i] == s[i - p]` for all `i >= p`.
fn minimal_period(s: &[Token]) -> usize {
    (1..=s.len())
        .find(|&p| (p..s.len()).all(|i| s[i] == s[i - p]))
        .unwrap_or(s.len().max(1))
}

/// One rollout: prompt, sampled response, behavior log-probs and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
    /// Sequence-level reward r(x, y).
    pub reward: f64,
    pub token_rewards: Vec<f64>,
}

impl Episode {
    /// Episode whose reward sits entirely on the final token.
    pub fn terminal(
        prompt: Vec<Token>,
        response: Vec<Token>,
        behavior_logprobs: Vec<f64>,
        reward: f64,
    ) -> Result<Self> {
        if response.is_empty() {
            return Err(LabError::Data("episode response must be non-empty".into()));
        }
        let mut token_rewards = vec![0.0; response.len()];
        *token_rewards.last_mut().unwrap() = reward;
        Ok(Self {
            prompt,
            response,
            behavior_logprobs,
            reward,
            token_rewards,
        })
    }

    /// Episode scored by the task's ground truth.
    pub fn scored(
        task: &TokenTask,
        prompt: Vec<Token>,
        response: Vec<Token>,
        behavior_logprobs: Vec<f64>,
    ) -> Result<Self> {
        let reward = task.ground_truth_reward(&prompt, &response)?;
        let token_rewards = task.token_rewards(&prompt, &response)?;
        Ok(Self {
            prompt,
            response,
            behavior_logprobs,
            reward,
            token_rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Discounted suffix sums of the per-token rewards.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.token_rewards.len()];
        let mut acc = 0.0;
        for t in (0..out.len()).rev() {
            acc = self.token_rewards[t] + gamma * acc;
            out[t] = acc;
        }
        out
    }
}

/// Every response the task admits for `prompt` over payload tokens plus
/// end-of-sequence: sequences ending in end-of-sequence within the length cap,
/// plus cap-length sequences without it. Each comes with its reward.
pub fn enumerate_responses(
    task: &TokenTask,
    prompt: &[Token],
    cap: usize,
) -> Result<Vec<(Vec<Token>, f64)>> {
    let mut alphabet = task.vocab.payload_tokens();
    alphabet.push(task.vocab.eos);
    let mut out = Vec::new();
    let mut stack: Vec<Vec<Token>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        for &t in alphabet.iter().rev() {
            let mut next = prefix.clone();
            next.push(t);
            if t == task.vocab.eos || next.len() == task.max_response_len {
                if out.len() == cap {
                    return Err(LabError::CapExceeded { cap });
                }
                let r = task.ground_truth_reward(prompt, &next)?;
                out.push((next, r));
            } else {
                stack.push(next);
            }
        }
    }
    Ok(out)
}
