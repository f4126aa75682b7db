use super::derive_seed;
use super::gae::normalized_score;
use crate::autodiff::{Scalar, Tape};
use crate::backbone::{ForwardOptions, TitModel, WindowBatch};
use crate::envs::{EnvKind, ObservationHistory};
use crate::error::{Result, TitError};

/// Summary of a fixed number of evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Episode returns in episode order.
    pub returns: Vec<f64>,
    pub normalized: Option<f64>,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            episodes: returns.len(),
            mean,
            std,
            returns,
            normalized: None,
        }
    }

    pub fn with_normalized(mut self, random_score: f64, expert_score: f64) -> Result<Self> {
        self.normalized = Some(normalized_score(self.mean, random_score, expert_score)?);
        Ok(self)
    }
}

/// Largest number of episodes stepped side by side.
const EVAL_LANES: usize = 32;

/// Runs `episodes` episodes of `env`, episode `i` reset with a seed derived
/// from `(seed, i)`. `policy` maps a batch of history windows to one action
/// per window.
pub fn evaluate_with<F>(
    env: EnvKind,
    context: usize,
    episodes: usize,
    seed: u64,
    mut policy: F,
) -> Result<EvalReport>
where
    F: FnMut(&WindowBatch) -> Result<Vec<usize>>,
{
    let obs_len = env.obs_shape().len();
    let mut returns = vec![0.0; episodes];
    let mut next_episode = 0;
    // (episode index, env, history)
    let mut active = Vec::new();
    while active.len() < episodes.min(EVAL_LANES) {
        let mut e = env.make(0);
        let mut h = ObservationHistory::new(context, obs_len)?;
        h.push(&e.reset(Some(derive_seed(seed, next_episode as u64))))?;
        active.push((next_episode, e, h));
        next_episode += 1;
    }
    while !active.is_empty() {
        let windows: Vec<_> = active.iter().map(|(_, _, h)| h.window()).collect();
        let batch = WindowBatch::from_windows(&windows, context, obs_len)?;
        let actions = policy(&batch)?;
        if actions.len() != active.len() {
            return Err(TitError::Shape {
                op: "evaluate",
                lhs: vec![actions.len()],
                rhs: vec![active.len()],
            });
        }
        let mut still = Vec::with_capacity(active.len());
        for ((mut ep, mut e, mut h), a) in active.into_iter().zip(actions) {
            let r = e.step(a)?;
            returns[ep] += r.reward as f64;
            if !r.done() {
                h.push(&r.obs)?;
            } else if next_episode < episodes {
                ep = next_episode;
                next_episode += 1;
                h.clear();
                h.push(&e.reset(Some(derive_seed(seed, ep as u64))))?;
            } else {
                continue;
            }
            still.push((ep, e, h));
        }
        active = still;
    }
    Ok(EvalReport::from_returns(returns))
}

/// Argmax of each row of the model's action output.
pub fn greedy_actions<T: Scalar>(model: &TitModel<T>, batch: &WindowBatch) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, ForwardOptions::default())?;
    let logits = tape.value(out.action);
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy evaluation of `model` over `episodes` seeded episodes. Dropout is
/// off and the parameters are only read.
pub fn evaluate_policy<T: Scalar>(
    model: &TitModel<T>,
    env: EnvKind,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(env, model.config().context_len, episodes, seed, |batch| {
        greedy_actions(model, batch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TitConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Balances from observations alone: lean into the fall, damped by the
    /// cart's drift.
    fn balancer(batch: &WindowBatch) -> Result<Vec<usize>> {
        Ok((0..batch.batch())
            .map(|b| {
                let o = batch.frame(b, batch.context() - 1);
                let push = 0.1 * o[0] + 0.5 * o[1] + 10.0 * o[2] + 2.0 * o[3];
                usize::from(push > 0.0)
            })
            .collect())
    }

    #[test]
    fn balancing_policy_scores_500_with_zero_spread() {
        let report = evaluate_with(EnvKind::CartPole, 1, 100, 9, balancer).unwrap();
        assert_eq!(report.episodes, 100);
        assert_eq!(report.mean, 500.0);
        assert_eq!(report.std, 0.0);
    }

    #[test]
    fn seeded_random_policy_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            evaluate_with(EnvKind::CartPole, 2, 100, 11, |b| {
                Ok((0..b.batch()).map(|_| rng.random_range(0..2)).collect())
            })
            .unwrap()
        };
        let a = run();
        assert_eq!(a.returns.len(), 100);
        assert_eq!(format!("{a:?}"), format!("{:?}", run()));
        // Population std recomputed from the raw returns.
        let mean = a.returns.iter().sum::<f64>() / 100.0;
        let var = a
            .returns
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / 100.0;
        assert!((a.std - var.sqrt()).abs() < 1e-9);
        assert!(a.mean < 100.0);
    }

    #[test]
    fn evaluation_leaves_parameters_untouched() {
        let model = TitModel::<f32>::new(
            TitConfig {
                embed_dim: 8,
                context_len: 2,
                head_hidden: 8,
                ..TitConfig::default()
            },
            2,
        )
        .unwrap();
        let before = model.params().snapshot();
        let a = evaluate_policy(&model, EnvKind::CartPole, 5, 0).unwrap();
        assert_eq!(model.params().snapshot(), before);
        assert_eq!(a, evaluate_policy(&model, EnvKind::CartPole, 5, 0).unwrap());
    }

    #[test]
    fn normalized_report() {
        let r = EvalReport::from_returns(vec![10.0, 20.0])
            .with_normalized(0.0, 30.0)
            .unwrap();
        assert_eq!(r.normalized, Some(50.0));
        assert_eq!(r.std, 5.0);
    }
}
