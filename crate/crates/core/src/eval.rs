//! Exact checks on tabular MDPs plus win-rate and distribution-shift
//! evaluation of trained models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreferencePair;
use crate::env::{solve_q, Backup, QTable, TabularMdp, TabularPolicy, Token, TokenTask};
use crate::error::{LabError, Result};
use crate::gvm::{pairwise_accuracy, Aggregation};
use crate::models::{Model, Role, SamplerConfig};
use crate::seed;

/// Action values of `pi` under an arbitrary reward table.
pub fn reward_to_value(
    reward: &[f64],
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    tol: f64,
) -> Result<QTable> {
    solve_q(mdp, reward, Backup::Policy(pi), tol)
}

/// `R(s,a) = Q(s,a) - gamma * V(next(s,a))`. Terminal rows are zero.
pub fn value_to_reward(q: &QTable, mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.validate()?;
    check_shape(mdp, q.n_states, q.n_actions)?;
    check_shape(mdp, pi.n_states, pi.n_actions)?;
    let mut out = vec![0.0; mdp.n_states * mdp.n_actions];
    for s in (0..mdp.n_states).filter(|s| !mdp.terminal[*s]) {
        for a in 0..mdp.n_actions {
            let i = mdp.idx(s, a);
            let n = mdp.next[i];
            let v = if mdp.terminal[n] {
                0.0
            } else {
                q.state_value(n, Backup::Policy(pi))
            };
            out[i] = q.values[i] - mdp.gamma * v;
        }
    }
    Ok(out)
}

fn check_shape(mdp: &TabularMdp, s: usize, a: usize) -> Result<()> {
    if s != mdp.n_states || a != mdp.n_actions {
        return Err(LabError::Config(
            "table shape does not match the MDP".into(),
        ));
    }
    Ok(())
}

/// Expected discounted visit count of every state, starting in state 0.
/// Terminal states get zero.
pub fn discounted_occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.validate()?;
    check_shape(mdp, pi.n_states, pi.n_actions)?;
    let n = mdp.n_states;
    // (I - gamma P^T) d = e_0 over non-terminal states
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in (0..n).filter(|s| !mdp.terminal[*s]) {
        for a in 0..mdp.n_actions {
            let t = mdp.next[mdp.idx(s, a)];
            if !mdp.terminal[t] {
                m[(t, s)] -= mdp.gamma * pi.prob(s, a);
            }
        }
    }
    let mut rhs = DVector::<f64>::zeros(n);
    if !mdp.terminal[0] {
        rhs[0] = 1.0;
    }
    let d = m.lu().solve(&rhs).ok_or(LabError::Singular)?;
    if d.iter().any(|x| !x.is_finite()) {
        return Err(LabError::Singular);
    }
    Ok(d.iter().copied().collect())
}

/// Exact `sum_s d(s) sum_a pi(a|s) grad log pi(a|s) (A(s,a) - b(s))` for a
/// softmax policy over `logits`, flattened in `(s, a)` order of the logits.
pub fn policy_gradient(
    mdp: &TabularMdp,
    logits: &[f64],
    advantage: &[f64],
    baseline: &[f64],
) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if advantage.len() != ns * na || baseline.len() != ns {
        return Err(LabError::Config(
            "advantage or baseline table has the wrong size".into(),
        ));
    }
    let pi = TabularPolicy::from_logits(ns, na, logits)?;
    let d = discounted_occupancy(mdp, &pi)?;
    let mut grad = vec![0.0; ns * na];
    for s in (0..ns).filter(|s| !mdp.terminal[*s]) {
        for a in 0..na {
            let w = d[s] * pi.prob(s, a) * (advantage[mdp.idx(s, a)] - baseline[s]);
            // d log pi(a|s) / d logit(s, k) = [a == k] - pi(k|s)
            for k in 0..na {
                grad[mdp.idx(s, k)] += w * ((a == k) as u8 as f64 - pi.prob(s, k));
            }
        }
    }
    Ok(grad)
}

/// `sum_s d(s) max_a ||grad log pi(a|s)||`.
pub fn score_norm_weight(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let d = discounted_occupancy(mdp, pi)?;
    let mut total = 0.0;
    for s in (0..mdp.n_states).filter(|s| !mdp.terminal[*s]) {
        let row = pi.row(s);
        let sq: f64 = row.iter().map(|p| p * p).sum();
        let worst = row
            .iter()
            .map(|p| (1.0 - 2.0 * p + sq).max(0.0).sqrt())
            .fold(0.0, f64::max);
        total += d[s] * worst;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub eps_r: f64,
    pub eps_q: f64,
    pub seed: u64,
    /// Gradient from the value table solved out of the noisy reward.
    pub grad_from_reward: Vec<f64>,
    /// Gradient from the directly corrupted value table.
    pub grad_from_value: Vec<f64>,
    pub gap: f64,
    pub cosine: f64,
    /// Measured `max |Q_from_reward - Q_true|` over non-terminal entries.
    pub eps_r2q: f64,
    pub score_weight: f64,
    /// `(eps_r2q + eps_q) * score_weight`
    pub bound: f64,
}

fn uniform_noise(n: usize, eps: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if eps > 0.0 {
                rng.random_range(-eps..=eps)
            } else {
                0.0
            }
        })
        .collect()
}

/// Policy-gradient gap between a value table derived from a noisy reward and a
/// directly noised value table, for the softmax policy over `logits`.
pub fn equivalence_gap(
    mdp: &TabularMdp,
    logits: &[f64],
    eps_r: f64,
    eps_q: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if !(eps_r >= 0.0) || !(eps_q >= 0.0) {
        return Err(LabError::Config("noise levels must be non-negative".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let pi = TabularPolicy::from_logits(ns, na, logits)?;
    let tol = 1e-13;
    let q_true = reward_to_value(&mdp.reward, mdp, &pi, tol)?;

    let mut rng = seed::rng_for(seed, &[seed::tag("equiv-reward")]);
    let noisy_r: Vec<f64> = mdp
        .reward
        .iter()
        .zip(uniform_noise(ns * na, eps_r, &mut rng))
        .map(|(r, e)| r + e)
        .collect();
    let q_from_r = reward_to_value(&noisy_r, mdp, &pi, tol)?;

    let mut rng = seed::rng_for(seed, &[seed::tag("equiv-value")]);
    let mut q_direct = q_true.clone();
    for (q, e) in q_direct
        .values
        .iter_mut()
        .zip(uniform_noise(ns * na, eps_q, &mut rng))
    {
        *q += e;
    }

    let zero = vec![0.0; ns];
    let gr = policy_gradient(mdp, logits, &q_from_r.values, &zero)?;
    let gq = policy_gradient(mdp, logits, &q_direct.values, &zero)?;
    let gap = gr
        .iter()
        .zip(&gq)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let (nr, nq) = (norm(&gr), norm(&gq));
    let cosine = match (nr > 0.0, nq > 0.0) {
        (true, true) => gr.iter().zip(&gq).map(|(a, b)| a * b).sum::<f64>() / (nr * nq),
        (false, false) => 1.0,
        _ => 0.0,
    };
    let mut eps_r2q = 0.0f64;
    for s in (0..ns).filter(|s| !mdp.terminal[*s]) {
        for a in 0..na {
            let i = mdp.idx(s, a);
            eps_r2q = eps_r2q.max((q_from_r.values[i] - q_true.values[i]).abs());
        }
    }
    let score_weight = score_norm_weight(mdp, &pi)?;
    Ok(EquivalenceReport {
        eps_r,
        eps_q,
        seed,
        grad_from_reward: gr,
        grad_from_value: gq,
        gap,
        cosine,
        eps_r2q,
        score_weight,
        bound: (eps_r2q + eps_q) * score_weight,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub winners: Vec<Winner>,
    /// Wins of A plus half the ties, over all prompts.
    pub win_rate: f64,
    pub judge: String,
}

/// Compares two response generators prompt by prompt using the task's
/// ground-truth reward.
pub fn judge_win_rate_with(
    mut a: impl FnMut(&[Token]) -> Result<Vec<Token>>,
    mut b: impl FnMut(&[Token]) -> Result<Vec<Token>>,
    task: &TokenTask,
    n_prompts: usize,
    seed: u64,
) -> Result<WinRateReport> {
    if n_prompts == 0 {
        return Err(LabError::Data("win rate needs at least one prompt".into()));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("judge")]);
    let mut winners = Vec::with_capacity(n_prompts);
    let mut score = 0.0;
    for _ in 0..n_prompts {
        let p = task.sample_prompt_with(&mut rng);
        let ra = task.ground_truth_reward(&p, &a(&p)?)?;
        let rb = task.ground_truth_reward(&p, &b(&p)?)?;
        let w = if ra > rb {
            Winner::A
        } else if rb > ra {
            Winner::B
        } else {
            Winner::Tie
        };
        score += match w {
            Winner::A => 1.0,
            Winner::B => 0.0,
            Winner::Tie => 0.5,
        };
        winners.push(w);
    }
    Ok(WinRateReport {
        winners,
        win_rate: score / n_prompts as f64,
        judge: "ground-truth reward".into(),
    })
}

/// Greedy responses of two policies judged by ground-truth reward.
pub fn judge_win_rate(
    a: &Model,
    b: &Model,
    task: &TokenTask,
    n_prompts: usize,
    seed: u64,
) -> Result<WinRateReport> {
    a.expect_role(Role::Policy)?;
    b.expect_role(Role::Policy)?;
    let cfg = SamplerConfig::greedy(task.max_response_len);
    judge_win_rate_with(
        |p| Ok(a.sample(&[], p, &cfg, &mut seed::rng(0))?.0),
        |p| Ok(b.sample(&[], p, &cfg, &mut seed::rng(0))?.0),
        task,
        n_prompts,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub in_distribution: f64,
    pub shifted: f64,
    pub n_in_distribution: usize,
    pub n_shifted: usize,
}

/// Pairwise accuracy of a value model on an in-distribution split and a
/// shifted split.
pub fn shift_eval(
    model: &Model,
    in_distribution: &[PreferencePair],
    shifted: &[PreferencePair],
    agg: Aggregation,
) -> Result<ShiftReport> {
    if shifted.is_empty() {
        return Err(LabError::Data("shifted split is empty".into()));
    }
    Ok(ShiftReport {
        in_distribution: pairwise_accuracy(model, in_distribution, agg)?,
        shifted: pairwise_accuracy(model, shifted, agg)?,
        n_in_distribution: in_distribution.len(),
        n_shifted: shifted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::value_iteration;

    fn mdp(seed: u64) -> TabularMdp {
        TabularMdp::layered(&[1, 2, 2], 2, 1.0, &mut seed::rng(seed)).unwrap()
    }

    fn logits(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn trivial_values() {
        let m = mdp(0);
        let pi = TabularPolicy::uniform(m.n_states, m.n_actions);
        let q = reward_to_value(&vec![0.0; m.reward.len()], &m, &pi, 1e-12).unwrap();
        assert!(q.values.iter().all(|v| *v == 0.0));

        // absorbing loop on state 0 with unit reward
        let m = TabularMdp::new(
            2,
            1,
            vec![0, 1],
            vec![1.0, 0.0],
            vec![false, true],
            0.9,
            usize::MAX,
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        let q = reward_to_value(&m.reward, &m, &pi, 1e-12).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn inversion_recovers_reward() {
        let m = mdp(3);
        let pi = TabularPolicy::from_logits(m.n_states, 2, &logits(m.n_states * 2, 4)).unwrap();
        let q = value_iteration(&m, Backup::Policy(&pi), 1e-12).unwrap();
        let r = value_to_reward(&q, &m, &pi).unwrap();
        for (a, b) in r.iter().zip(&m.reward) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_q_telescopes() {
        // 0 -> 1 -> 2 (terminal)
        let m = TabularMdp::new(
            3,
            1,
            vec![1, 2, 2],
            vec![0.0; 3],
            vec![false, false, true],
            1.0,
            2,
        )
        .unwrap();
        let pi = TabularPolicy::uniform(3, 1);
        let q = QTable {
            n_states: 3,
            n_actions: 1,
            values: vec![2.5, 2.5, 0.0],
        };
        assert_eq!(value_to_reward(&q, &m, &pi).unwrap()[0], 0.0);
    }

    fn exact_return(m: &TabularMdp, th: &[f64]) -> f64 {
        let pi = TabularPolicy::from_logits(m.n_states, m.n_actions, th).unwrap();
        value_iteration(m, Backup::Policy(&pi), 1e-13)
            .unwrap()
            .state_value(0, Backup::Policy(&pi))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (k, m) in [
            mdp(5),
            TabularMdp::random(5, 3, 0.8, &mut seed::rng(6)).unwrap(),
        ]
        .iter()
        .enumerate()
        {
            let th = logits(m.n_states * m.n_actions, 7 + k as u64);
            let pi = TabularPolicy::from_logits(m.n_states, m.n_actions, &th).unwrap();
            let q = value_iteration(m, Backup::Policy(&pi), 1e-13).unwrap();
            let g = policy_gradient(m, &th, &q.values, &vec![0.0; m.n_states]).unwrap();
            let h = 1e-5;
            for i in 0..th.len() {
                let (mut p, mut n) = (th.clone(), th.clone());
                p[i] += h;
                n[i] -= h;
                let fd = (exact_return(m, &p) - exact_return(m, &n)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn gradient_trivial_cases() {
        let m = mdp(8);
        let n = m.n_states * m.n_actions;
        let b: Vec<f64> = (0..m.n_states).map(|s| s as f64 * 0.3).collect();
        let a: Vec<f64> = (0..n).map(|i| b[i / m.n_actions]).collect();
        assert!(policy_gradient(&m, &logits(n, 1), &a, &b)
            .unwrap()
            .iter()
            .all(|x| x.abs() < 1e-15));

        // one state, two actions, advantage +1 / -1
        let m = TabularMdp::new(
            2,
            2,
            vec![1, 1, 1, 1],
            vec![0.0; 4],
            vec![false, true],
            1.0,
            1,
        )
        .unwrap();
        let g = policy_gradient(&m, &[0.0; 4], &[1.0, -1.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(g[0] > 0.0 && g[1] < 0.0);
    }

    #[test]
    fn singular_occupancy() {
        // undiscounted self-loop never terminates
        let m = TabularMdp::new(
            2,
            1,
            vec![0, 1],
            vec![0.0; 2],
            vec![false, true],
            1.0,
            usize::MAX,
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        assert!(matches!(
            discounted_occupancy(&m, &pi),
            Err(LabError::Singular)
        ));
    }

    #[test]
    fn zero_noise_gap_vanishes() {
        let m = mdp(9);
        let r = equivalence_gap(&m, &logits(m.n_states * 2, 10), 0.0, 0.0, 3).unwrap();
        assert!(r.gap <= 1e-9);
        assert!((r.cosine - 1.0).abs() < 1e-9);
        assert_eq!(
            r,
            equivalence_gap(&m, &logits(m.n_states * 2, 10), 0.0, 0.0, 3).unwrap()
        );
    }

    #[test]
    fn larger_noise_larger_median_gap() {
        let m = mdp(11);
        let th = logits(m.n_states * 2, 12);
        let median = |eps: f64| {
            let mut g: Vec<f64> = (0..100)
                .map(|s| equivalence_gap(&m, &th, eps, eps, s).unwrap().gap)
                .collect();
            g.sort_by(f64::total_cmp);
            g[50]
        };
        assert!(median(0.1) > median(0.01));
    }

    #[test]
    fn win_rate_symmetry() {
        use crate::env::{LenRange, TaskKind, Vocabulary};
        let task = TokenTask::new(
            TaskKind::Copy,
            Vocabulary::with_payload(4),
            LenRange::new(2, 3),
            5,
        );
        let oracle = |p: &[Token]| Ok(task.target(p));
        let junk = |_: &[Token]| Ok(vec![4]);
        let ab = judge_win_rate_with(oracle, junk, &task, 50, 1).unwrap();
        let ba = judge_win_rate_with(junk, oracle, &task, 50, 1).unwrap();
        assert!(ab.win_rate >= 0.9);
        assert!((ab.win_rate + ba.win_rate - 1.0).abs() < 1e-12);
        let aa = judge_win_rate_with(oracle, oracle, &task, 20, 2).unwrap();
        assert_eq!(aa.win_rate, 0.5);
        assert!(aa.winners.iter().all(|w| *w == Winner::Tie));
    }
}
