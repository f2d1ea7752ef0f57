use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const MAX_SWEEPS: usize = 1_000_000;

/// Finite MDP with deterministic transitions. Terminal states are absorbing
/// with zero value; their rows in the tables are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `next[s * n_actions + a]`
    pub next: Vec<usize>,
    /// `reward[s * n_actions + a]`
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
    pub gamma: f64,
    /// Upper bound on episode length.
    pub horizon: usize,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        next: Vec<usize>,
        reward: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            next,
            reward,
            terminal,
            gamma,
            horizon,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let sa = self.n_states * self.n_actions;
        if sa == 0 {
            return Err(LabError::Config(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if self.next.len() != sa || self.reward.len() != sa || self.terminal.len() != self.n_states
        {
            return Err(LabError::Config(
                "MDP table sizes do not match S x A".into(),
            ));
        }
        if let Some(s) = self.next.iter().find(|s| **s >= self.n_states) {
            return Err(LabError::Config(format!(
                "transition to state {s} out of range"
            )));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(LabError::Config("reward table must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LabError::Config(format!(
                "discount {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Layered MDP: layer `i` transitions only into layer `i + 1`, and the final
    /// layer is a single terminal state. Every episode has length `widths.len()`.
    pub fn layered<R: Rng>(
        widths: &[usize],
        n_actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(LabError::Config("layer widths must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(widths.len() + 1);
        let mut total = 0;
        for w in widths {
            offsets.push(total);
            total += w;
        }
        offsets.push(total);
        let n_states = total + 1;
        let mut next = Vec::with_capacity(n_states * n_actions);
        let mut reward = Vec::with_capacity(n_states * n_actions);
        for (layer, w) in widths.iter().enumerate() {
            for _ in 0..*w {
                for _ in 0..n_actions {
                    let target = match widths.get(layer + 1) {
                        Some(nw) => offsets[layer + 1] + rng.random_range(0..*nw),
                        None => total,
                    };
                    next.push(target);
                    reward.push(rng.random_range(-1.0..1.0));
                }
            }
        }
        next.extend(vec![total; n_actions]);
        reward.extend(vec![0.0; n_actions]);
        let mut terminal = vec![false; n_states];
        terminal[total] = true;
        Self::new(
            n_states,
            n_actions,
            next,
            reward,
            terminal,
            gamma,
            widths.len(),
        )
    }

    /// Arbitrary transition graph (cycles allowed) with the last state terminal.
    /// Needs `gamma < 1` for values to be well defined.
    pub fn random<R: Rng>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_states < 2 {
            return Err(LabError::Config(
                "random MDP needs at least two states".into(),
            ));
        }
        let sa = n_states * n_actions;
        let next = (0..sa).map(|_| rng.random_range(0..n_states)).collect();
        let reward = (0..sa).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut terminal = vec![false; n_states];
        terminal[n_states - 1] = true;
        Self::new(
            n_states,
            n_actions,
            next,
            reward,
            terminal,
            gamma,
            usize::MAX,
        )
    }

    #[inline]
    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn step(&self, s: usize, a: usize) -> (usize, f64) {
        let i = self.idx(s, a);
        (self.next[i], self.reward[i])
    }

    /// Length of the longest path through non-terminal states, or
    /// `NonTerminating` if they contain a cycle.
    pub fn longest_path(&self) -> Result<usize> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut mark = vec![0u8; self.n_states];
        let mut depth = vec![0usize; self.n_states];
        for root in 0..self.n_states {
            if mark[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            mark[root] = 1;
            while let Some(&mut (s, ref mut a)) = stack.last_mut() {
                if self.terminal[s] || *a == self.n_actions {
                    let d = if self.terminal[s] {
                        0
                    } else {
                        (0..self.n_actions)
                            .map(|a| depth[self.next[self.idx(s, a)]] + 1)
                            .max()
                            .unwrap_or(0)
                    };
                    depth[s] = d;
                    mark[s] = 2;
                    stack.pop();
                    continue;
                }
                let n = self.next[self.idx(s, *a)];
                *a += 1;
                match mark[n] {
                    0 => {
                        mark[n] = 1;
                        stack.push((n, 0));
                    }
                    1 if !self.terminal[n] => return Err(LabError::NonTerminating),
                    _ => {}
                }
            }
        }
        Ok(depth.into_iter().max().unwrap_or(0))
    }
}

/// Per-state action distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Softmax over each state's row of `logits`.
    pub fn from_logits(n_states: usize, n_actions: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(LabError::Config(
                "logit table size does not match S x A".into(),
            ));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(n_actions) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            probs.extend(e.into_iter().map(|x| x / z));
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            let row = self.row(s);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0)
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(LabError::Config(format!(
                    "policy row {s} is not a distribution"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    /// State value under `backup`.
    pub fn state_value(&self, s: usize, backup: Backup<'_>) -> f64 {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        match backup {
            Backup::Optimal => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Backup::Policy(pi) => row.iter().zip(pi.row(s)).map(|(q, p)| q * p).sum(),
        }
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// How the next state's value is formed from its action values.
#[derive(Debug, Clone, Copy)]
pub enum Backup<'a> {
    Optimal,
    Policy(&'a TabularPolicy),
}

impl Backup<'_> {
    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if let Backup::Policy(pi) = self {
            if pi.n_states != mdp.n_states || pi.n_actions != mdp.n_actions {
                return Err(LabError::Config(
                    "policy shape does not match the MDP".into(),
                ));
            }
            pi.validate()?;
        }
        Ok(())
    }
}

fn next_value(mdp: &TabularMdp, q: &QTable, s: usize, a: usize, backup: Backup<'_>) -> f64 {
    let n = mdp.next[mdp.idx(s, a)];
    if mdp.terminal[n] {
        0.0
    } else {
        q.state_value(n, backup)
    }
}

fn sweep(mdp: &TabularMdp, reward: &[f64], q: &QTable, backup: Backup<'_>) -> QTable {
    let mut out = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in (0..mdp.n_states).filter(|s| !mdp.terminal[*s]) {
        for a in 0..mdp.n_actions {
            let i = mdp.idx(s, a);
            out.values[i] = reward[i] + mdp.gamma * next_value(mdp, q, s, a, backup);
        }
    }
    out
}

/// Fixed point of `Q(s,a) = reward(s,a) + gamma * V(next(s,a))` for an arbitrary
/// reward table. With `gamma = 1` the non-terminal states must be acyclic and
/// the result is exact; otherwise iteration stops once the remaining error is
/// provably within `tol`.
pub fn solve_q(mdp: &TabularMdp, reward: &[f64], backup: Backup<'_>, tol: f64) -> Result<QTable> {
    mdp.validate()?;
    backup.check(mdp)?;
    if reward.len() != mdp.n_states * mdp.n_actions {
        return Err(LabError::Config(
            "reward table size does not match S x A".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(LabError::Config("tolerance must be positive".into()));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    if mdp.gamma >= 1.0 {
        let sweeps = mdp.longest_path()? + 1;
        for _ in 0..sweeps {
            q = sweep(mdp, reward, &q, backup);
        }
        return Ok(q);
    }
    for _ in 0..MAX_SWEEPS {
        let nq = sweep(mdp, reward, &q, backup);
        let delta = nq.max_abs_diff(&q);
        q = nq;
        if delta * mdp.gamma <= tol * (1.0 - mdp.gamma) {
            return Ok(q);
        }
    }
    Err(LabError::NoConvergence {
        iterations: MAX_SWEEPS,
    })
}

/// Action values for the MDP's own reward table.
pub fn value_iteration(mdp: &TabularMdp, backup: Backup<'_>, tol: f64) -> Result<QTable> {
    solve_q(mdp, &mdp.reward, backup, tol)
}

/// Largest `|Q(s,a) - reward(s,a) - gamma * V(next(s,a))|` over non-terminal states.
pub fn bellman_residual(mdp: &TabularMdp, reward: &[f64], q: &QTable, backup: Backup<'_>) -> f64 {
    let mut worst = 0.0f64;
    for s in (0..mdp.n_states).filter(|s| !mdp.terminal[*s]) {
        for a in 0..mdp.n_actions {
            let i = mdp.idx(s, a);
            let r = q.values[i] - reward[i] - mdp.gamma * next_value(mdp, q, s, a, backup);
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// One complete action sequence from a start state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpEpisode {
    /// State before each action.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub discounted_return: f64,
}

impl MdpEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn probability(&self, pi: &TabularPolicy) -> f64 {
        self.states
            .iter()
            .zip(&self.actions)
            .map(|(s, a)| pi.prob(*s, *a))
            .product()
    }

    /// Discounted suffix sums of the rewards.
    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.rewards.len()];
        let mut acc = 0.0;
        for t in (0..out.len()).rev() {
            acc = self.rewards[t] + gamma * acc;
            out[t] = acc;
        }
        out
    }
}

/// Every action sequence from `start` that ends at a terminal state or after
/// `horizon` actions. A terminal start yields nothing.
pub fn enumerate_episodes(
    mdp: &TabularMdp,
    start: usize,
    horizon: usize,
    cap: usize,
) -> Result<Vec<MdpEpisode>> {
    mdp.validate()?;
    if start >= mdp.n_states {
        return Err(LabError::Config(format!(
            "start state {start} out of range"
        )));
    }
    let mut out = Vec::new();
    if mdp.terminal[start] || horizon == 0 {
        return Ok(out);
    }
    let mut stack = vec![MdpEpisode {
        states: vec![],
        actions: vec![],
        rewards: vec![],
        discounted_return: 0.0,
    }];
    while let Some(ep) = stack.pop() {
        let s = match ep.actions.last() {
            None => start,
            Some(a) => mdp.next[mdp.idx(*ep.states.last().unwrap(), *a)],
        };
        let done = !ep.actions.is_empty() && (mdp.terminal[s] || ep.actions.len() == horizon);
        if done {
            if out.len() == cap {
                return Err(LabError::CapExceeded { cap });
            }
            out.push(ep);
            continue;
        }
        for a in (0..mdp.n_actions).rev() {
            let (_, r) = mdp.step(s, a);
            let mut e = ep.clone();
            e.discounted_return += mdp.gamma.powi(e.actions.len() as i32) * r;
            e.states.push(s);
            e.actions.push(a);
            e.rewards.push(r);
            stack.push(e);
        }
    }
    Ok(out)
}
