/// Generalized advantage estimation over one episode. `values[t]` is the state
/// value before token `t`; the state after the last token has value zero.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// `R(sample) - R(greedy)` per prompt.
pub fn remax_advantages(sampled: &[f64], greedy: &[f64]) -> Vec<f64> {
    sampled.iter().zip(greedy).map(|(s, g)| s - g).collect()
}

/// Group-normalized rewards: `(r - mean) / (std + 1e-8)` with the population
/// standard deviation. A group of equal rewards yields zeros.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// Rescales all entries to zero mean and unit population variance in place.
pub fn whiten(values: &mut [Vec<f64>]) {
    let n: usize = values.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let mean = values.iter().flatten().sum::<f64>() / n as f64;
    let var = values
        .iter()
        .flatten()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt().max(1e-12);
    for v in values.iter_mut().flatten() {
        *v = (*v - mean) / std;
    }
}
