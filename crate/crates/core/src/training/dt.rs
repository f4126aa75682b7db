use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DtTrainConfig;
use super::eval::argmax;
use super::gae::returns_to_go;
use super::optim::Adam;
use crate::autodiff::{ParamStore, Scalar, Tape, Var};
use crate::backbone::{one_hot, DtBatch, DtModel, ForwardOptions};
use crate::blocks::Mode;
use crate::envs::Trajectory;
use crate::error::{Result, TitError};

/// Logged trajectories cut into fixed-length windows for the sequence model.
#[derive(Clone, Debug)]
pub struct DtDataset {
    trajectories: Vec<Trajectory>,
    /// Scaled returns-to-go per trajectory.
    rtg: Vec<Vec<f32>>,
    context: usize,
    obs_len: usize,
    action_count: usize,
}

impl DtDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        context: usize,
        obs_len: usize,
        action_count: usize,
        cfg: &DtTrainConfig,
    ) -> Result<Self> {
        if trajectories.is_empty() || trajectories.iter().any(|t| t.is_empty()) {
            return Err(TitError::EmptyContext { op: "dt_dataset" });
        }
        if context == 0 {
            return Err(TitError::config("context_len", "must be at least 1"));
        }
        for (i, traj) in trajectories.iter().enumerate() {
            for (s, step) in traj.steps.iter().enumerate() {
                if step.obs.len() != obs_len {
                    return Err(TitError::Shape {
                        op: "dt_dataset",
                        lhs: vec![i, s, step.obs.len()],
                        rhs: vec![obs_len],
                    });
                }
                if step.action >= action_count {
                    return Err(TitError::Env(format!(
                        "trajectory {i} step {s}: action {} outside 0..{action_count}",
                        step.action
                    )));
                }
            }
        }
        let rtg = trajectories
            .iter()
            .map(|t| {
                returns_to_go(&t.rewards(), cfg.rtg_gamma)
                    .into_iter()
                    .map(|r| (r / cfg.rtg_scale) as f32)
                    .collect()
            })
            .collect();
        Ok(Self {
            trajectories,
            rtg,
            context,
            obs_len,
            action_count,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn context(&self) -> usize {
        self.context
    }

    /// Total number of logged steps.
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every `(trajectory, step)` pair, in order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
            .collect()
    }

    /// Windows ending at each `(trajectory, step)`, left-padded at episode
    /// starts. Returns the batch, the logged action of every slot and the
    /// slot validity.
    pub fn batch(
        &self,
        ends: &[(usize, usize)],
        last_action_present: bool,
    ) -> Result<(DtBatch, Vec<usize>)> {
        let k = self.context;
        let mut batch = DtBatch {
            batch: ends.len(),
            steps: k,
            returns_to_go: Vec::with_capacity(ends.len() * k),
            obs: Vec::with_capacity(ends.len() * k * self.obs_len),
            actions: Vec::with_capacity(ends.len() * k * self.action_count),
            valid: Vec::with_capacity(ends.len() * k),
            last_action_present,
        };
        let mut targets = Vec::with_capacity(ends.len() * k);
        for &(i, end) in ends {
            let traj = self
                .trajectories
                .get(i)
                .filter(|t| end < t.len())
                .ok_or_else(|| TitError::Training(format!("no step {end} in trajectory {i}")))?;
            for slot in 0..k {
                match (end + slot + 1).checked_sub(k) {
                    Some(s) => {
                        let step = &traj.steps[s];
                        batch.returns_to_go.push(self.rtg[i][s]);
                        batch.obs.extend_from_slice(&step.obs);
                        batch
                            .actions
                            .extend(one_hot(&[step.action], self.action_count));
                        batch.valid.push(true);
                        targets.push(step.action);
                    }
                    None => {
                        batch.returns_to_go.push(0.0);
                        batch.obs.extend(std::iter::repeat_n(0.0, self.obs_len));
                        batch
                            .actions
                            .extend(std::iter::repeat_n(0.0, self.action_count));
                        batch.valid.push(false);
                        targets.push(0);
                    }
                }
            }
        }
        Ok((batch, targets))
    }
}

/// Mean cross-entropy between predicted and logged actions over the valid
/// observation positions of `batch`.
pub fn dt_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DtModel<T>,
    store: &ParamStore<T>,
    batch: &DtBatch,
    targets: &[usize],
    mode: Mode,
) -> Result<Var> {
    if targets.len() != batch.batch * batch.steps {
        return Err(TitError::Shape {
            op: "dt_loss",
            lhs: vec![targets.len()],
            rhs: vec![batch.batch, batch.steps],
        });
    }
    let out = model.forward_with(
        store,
        tape,
        batch,
        ForwardOptions {
            mode,
            capture_attention: false,
        },
    )?;
    let logp = tape.log_softmax(out.action)?;
    let picked = tape.pick_per_row(logp, targets)?;
    let count = batch.valid.iter().filter(|&&v| v).count() as f64;
    let w = batch
        .valid
        .iter()
        .map(|&v| {
            if v {
                T::from_f64_lossy(-1.0 / count)
            } else {
                T::zero()
            }
        })
        .collect();
    let weighted = tape.mul_const(picked, w)?;
    tape.sum(weighted)
}

/// One optimizer step on `batch`; returns the loss before the step.
pub fn dt_train_step<T: Scalar>(
    model: &mut DtModel<T>,
    opt: &mut Adam,
    batch: &DtBatch,
    targets: &[usize],
    mode: Mode,
    max_grad_norm: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = dt_loss(&mut tape, model, model.params(), batch, targets, mode)?;
    let grads = tape.backward(loss)?;
    let store = model.params_mut();
    store.zero_grad();
    grads.accumulate_into(store);
    store.clip_grad_norm(T::from_f64_lossy(max_grad_norm));
    opt.step(store)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Fraction of logged steps whose action is the argmax prediction, each
/// predicted from the window ending at that step with its action withheld.
pub fn dt_accuracy<T: Scalar>(model: &DtModel<T>, data: &DtDataset) -> Result<f64> {
    const CHUNK: usize = 64;
    let positions = data.positions();
    let k = data.context;
    let mut hits = 0;
    for chunk in positions.chunks(CHUNK) {
        let (batch, targets) = data.batch(chunk, false)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, ForwardOptions::default())?;
        let logits = tape.value(out.action);
        for b in 0..chunk.len() {
            let row = b * k + k - 1;
            if argmax(logits.row(row)) == targets[row] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / positions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtProgress {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains on uniformly sampled windows until `cfg.steps` steps or the target
/// accuracy, reporting every accuracy measurement to `on_eval`.
pub fn train_dt<T: Scalar>(
    model: &mut DtModel<T>,
    data: &DtDataset,
    cfg: &DtTrainConfig,
    seed: u64,
    mut on_eval: impl FnMut(&DtProgress) -> Result<()>,
) -> Result<DtProgress> {
    cfg.validate()?;
    if data.context != model.config().context_len {
        return Err(TitError::config(
            "context_len",
            format!(
                "dataset windows hold {} steps, the model {}",
                data.context,
                model.config().context_len
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(seed, 1));
    let dropout = super::derive_seed(seed, 2);
    let mut opt = Adam::new(cfg.learning_rate, 1e-8);
    let positions = data.positions();
    let mut progress = DtProgress {
        step: 0,
        loss: f64::NAN,
        accuracy: 0.0,
    };
    while progress.step < cfg.steps {
        let ends: Vec<_> = (0..cfg.batch_size)
            .map(|_| positions[rng.random_range(0..positions.len())])
            .collect();
        let (batch, targets) = data.batch(&ends, true)?;
        let mode = Mode::train(super::derive_seed(dropout, progress.step as u64));
        progress.loss = dt_train_step(model, &mut opt, &batch, &targets, mode, cfg.max_grad_norm)?;
        progress.step += 1;
        if progress.step.is_multiple_of(cfg.eval_every) || progress.step == cfg.steps {
            progress.accuracy = dt_accuracy(model, data)?;
            on_eval(&progress)?;
            if progress.accuracy >= cfg.target_accuracy {
                break;
            }
        }
    }
    Ok(progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::backbone::{ObsShape, TitConfig};
    use crate::envs::{EnvKind, Transition};

    fn cfg(context: usize) -> TitConfig {
        TitConfig {
            obs: ObsShape::Array { dim: 4 },
            embed_dim: 8,
            num_blocks: 1,
            context_len: context,
            head_hidden: 8,
            ..TitConfig::default()
        }
    }

    /// Trajectories of the scripted CartPole controller.
    fn expert_data(episodes: usize, max_steps: usize) -> Vec<Trajectory> {
        (0..episodes)
            .map(|i| {
                let mut env = EnvKind::CartPole.make(i as u64);
                let mut obs = env.reset(Some(i as u64));
                let mut traj = Trajectory::default();
                for _ in 0..max_steps {
                    let action = env.expert_action();
                    let r = env.step(action).unwrap();
                    traj.steps.push(Transition {
                        obs,
                        action,
                        reward: r.reward,
                        terminated: r.terminated,
                        truncated: r.truncated,
                    });
                    obs = r.obs;
                    if r.terminated || r.truncated {
                        break;
                    }
                }
                traj
            })
            .collect()
    }

    #[test]
    fn windows_pad_episode_starts() {
        let data = DtDataset::new(expert_data(2, 5), 3, 4, 2, &DtTrainConfig::default()).unwrap();
        let (batch, targets) = data.batch(&[(0, 0), (1, 4)], true).unwrap();
        assert_eq!(batch.valid, vec![false, false, true, true, true, true]);
        assert_eq!(targets.len(), 6);
        // Returns-to-go of 5 unit rewards, scaled by 1/8.
        assert_eq!(batch.returns_to_go[2], 5.0 / 8.0);
        assert_eq!(
            &batch.returns_to_go[3..],
            &[3.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0]
        );
        assert!(data.batch(&[(0, 5)], true).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_n() {
        let mut model = DtModel::<f64>::new(cfg(2), 1).unwrap();
        let head = model.handles().head.clone();
        let store = model.params_mut();
        for id in [head.out_w, head.out_b] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let data = DtDataset::new(expert_data(2, 6), 2, 4, 2, &DtTrainConfig::default()).unwrap();
        let (batch, targets) = data.batch(&[(0, 0), (1, 3)], true).unwrap();
        let mut tape = Tape::new();
        let loss = dt_loss(
            &mut tape,
            &model,
            model.params(),
            &batch,
            &targets,
            Mode::EVAL,
        )
        .unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        // Drive the output bias so that the logged action dominates.
        let mut model = DtModel::<f64>::new(cfg(1), 1).unwrap();
        let head = model.handles().head.clone();
        let store = model.params_mut();
        store.get_mut(head.out_w).value = Tensor::zeros(&[8, 2]);
        store.get_mut(head.out_b).value = Tensor::from_f64(&[1, 2], &[0.0, 1e3]).unwrap();
        let traj = Trajectory {
            steps: vec![
                Transition {
                    obs: vec![0.0; 4],
                    action: 1,
                    reward: 1.0,
                    terminated: false,
                    truncated: false,
                };
                3
            ],
        };
        let data = DtDataset::new(vec![traj], 1, 4, 2, &DtTrainConfig::default()).unwrap();
        let (batch, targets) = data.batch(&data.positions(), true).unwrap();
        let mut tape = Tape::new();
        let loss = dt_loss(
            &mut tape,
            &model,
            model.params(),
            &batch,
            &targets,
            Mode::EVAL,
        )
        .unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn loss_falls_monotonically_on_a_fixed_batch() {
        let trajs = expert_data(10, 20);
        let data = DtDataset::new(trajs, 3, 4, 2, &DtTrainConfig::default()).unwrap();
        let ends: Vec<_> = data.positions().into_iter().step_by(4).collect();
        let (batch, targets) = data.batch(&ends, true).unwrap();
        let mut model = DtModel::<f32>::new(cfg(3), 5).unwrap();
        let mut opt = Adam::new(3e-4, 1e-8);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(
                dt_train_step(&mut model, &mut opt, &batch, &targets, Mode::EVAL, 1.0).unwrap(),
            );
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn context_overflow_is_rejected() {
        let data = DtDataset::new(expert_data(1, 5), 3, 4, 2, &DtTrainConfig::default()).unwrap();
        let (batch, targets) = data.batch(&[(0, 4)], true).unwrap();
        let model = DtModel::<f32>::new(cfg(2), 1).unwrap();
        let mut tape = Tape::new();
        assert!(dt_loss(
            &mut tape,
            &model,
            model.params(),
            &batch,
            &targets,
            Mode::EVAL
        )
        .is_err());
        let mut m = model.clone();
        assert!(train_dt(&mut m, &data, &DtTrainConfig::default(), 0, |_| Ok(())).is_err());
    }

    #[test]
    fn bad_actions_are_rejected() {
        let mut trajs = expert_data(1, 3);
        trajs[0].steps[1].action = 5;
        assert!(DtDataset::new(trajs, 2, 4, 2, &DtTrainConfig::default()).is_err());
    }
}
