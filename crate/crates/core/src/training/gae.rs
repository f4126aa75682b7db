use crate::error::{Result, TitError};

/// Generalized advantage estimates for one environment's steps.
///
/// `dones[t]` marks that the episode ended after step `t`, so `values[t+1]`
/// (or `last_value` for the final step) belongs to a new episode and is not
/// bootstrapped from. Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(TitError::Shape {
            op: "compute_gae",
            lhs: vec![rewards.len()],
            rhs: vec![values.len(), dones.len()],
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Discounted suffix sums `R̂_t = r_t + γ·R̂_{t+1}`, zero past the end.
pub fn returns_to_go(rewards: &[f32], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] as f64 + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Shifts and scales `xs` to zero mean and unit population std.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// `100 · (score − random) / (expert − random)`.
pub fn normalized_score(score: f64, random_score: f64, expert_score: f64) -> Result<f64> {
    if expert_score.partial_cmp(&random_score) != Some(std::cmp::Ordering::Greater) {
        return Err(TitError::config(
            "expert_score",
            format!("{expert_score} must exceed the random score {random_score}"),
        ));
    }
    Ok(100.0 * (score - random_score) / (expert_score - random_score))
}
