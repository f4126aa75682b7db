use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::derive_seed;
use super::gae::{compute_gae, normalize};
use super::metrics::MetricsRow;
use super::optim::Adam;
use crate::autodiff::weights::{read_weights, write_weights};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::backbone::{ActionSpec, ForwardOptions, ObsWindow, TitModel, WindowBatch};
use crate::blocks::Mode;
use crate::envs::{Env, EnvKind, ObservationHistory};
use crate::error::{Result, TitError};

/// Completed episodes the reported return statistics average over.
const RETURN_WINDOW: usize = 100;

/// Stream tags for [`derive_seed`].
const SAMPLING_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const ENV_STREAM: u64 = 100;

/// Transitions from `num_envs` environments over `rollout_len` steps, stored
/// time-major (index `t · num_envs + e`).
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub rollout_len: usize,
    pub windows: Vec<ObsWindow>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Rewards, with `γ·V(final observation)` added at truncations.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize, rollout_len: usize) -> Self {
        Self {
            num_envs,
            rollout_len,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.num_envs * self.rollout_len
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        window: ObsWindow,
        action: usize,
        log_prob: f64,
        reward: f64,
        value: f64,
        done: bool,
    ) -> Result<()> {
        if self.is_full() {
            return Err(TitError::Training("rollout buffer is full".into()));
        }
        self.windows.push(window);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
        Ok(())
    }

    /// Computes advantages and returns per environment. `last_values[e]` is
    /// the value of the observation following the final step of env `e`.
    pub fn finish(&mut self, last_values: &[f64], gamma: f64, lambda: f64) -> Result<()> {
        if !self.is_full() || last_values.len() != self.num_envs {
            return Err(TitError::Shape {
                op: "rollout_finish",
                lhs: vec![self.len(), last_values.len()],
                rhs: vec![self.num_envs * self.rollout_len, self.num_envs],
            });
        }
        let (e_n, t_n) = (self.num_envs, self.rollout_len);
        self.advantages = vec![0.0; e_n * t_n];
        self.returns = vec![0.0; e_n * t_n];
        for e in 0..e_n {
            let column = |xs: &[f64]| (0..t_n).map(|t| xs[t * e_n + e]).collect::<Vec<_>>();
            let dones: Vec<bool> = (0..t_n).map(|t| self.dones[t * e_n + e]).collect();
            let (adv, ret) = compute_gae(
                &column(&self.rewards),
                &column(&self.values),
                &dones,
                last_values[e],
                gamma,
                lambda,
            )?;
            for t in 0..t_n {
                self.advantages[t * e_n + e] = adv[t];
                self.returns[t * e_n + e] = ret[t];
            }
        }
        Ok(())
    }
}

/// Loss terms of one minibatch; `total = policy + c_v·value − c_e·entropy`.
#[derive(Clone, Copy, Debug)]
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Per-sample clipped surrogate `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Builds the clipped-surrogate loss for a minibatch on `tape`, reading
/// parameters from `store`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TitModel<T>,
    store: &ParamStore<T>,
    batch: &WindowBatch,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<PpoLoss> {
    let m = batch.batch();
    for len in [
        actions.len(),
        old_log_probs.len(),
        advantages.len(),
        returns.len(),
    ] {
        if len != m {
            return Err(TitError::Shape {
                op: "ppo_loss",
                lhs: vec![len],
                rhs: vec![m],
            });
        }
    }
    let cast = |xs: &[f64]| xs.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
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
    let logp_a = tape.pick_per_row(logp, actions)?;
    let old = tape.constant(Tensor::new(vec![m, 1], cast(old_log_probs))?)?;
    let diff = tape.sub(logp_a, old)?;
    let ratio = tape.exp(diff)?;
    let surr = tape.mul_const(ratio, cast(advantages))?;
    let eps = cfg.clip_range;
    let clipped = tape.clamp(
        ratio,
        T::from_f64_lossy(1.0 - eps),
        T::from_f64_lossy(1.0 + eps),
    )?;
    let clipped = tape.mul_const(clipped, cast(advantages))?;
    let objective = tape.minimum(surr, clipped)?;
    let objective = tape.mean(objective)?;
    let policy = tape.scale(objective, -T::one())?;

    let target = tape.constant(Tensor::new(vec![m, 1], cast(returns))?)?;
    let err = tape.sub(out.value, target)?;
    let err = tape.square(err)?;
    let value = tape.mean(err)?;

    let p = tape.exp(logp)?;
    let plogp = tape.mul(p, logp)?;
    let plogp = tape.sum_cols(plogp)?;
    let neg_entropy = tape.mean(plogp)?;
    let entropy = tape.scale(neg_entropy, -T::one())?;

    let weighted_value = tape.scale(value, T::from_f64_lossy(cfg.vf_coef))?;
    let total = tape.add(policy, weighted_value)?;
    let bonus = tape.scale(neg_entropy, T::from_f64_lossy(cfg.ent_coef))?;
    let total = tape.add(total, bonus)?;
    Ok(PpoLoss {
        total,
        policy,
        value,
        entropy,
    })
}

/// Mean loss terms over every minibatch of an update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub minibatches: usize,
}

/// Softmax probabilities and log-probabilities of one logit row, in `f64`.
fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|x| (x.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

fn sample_categorical(logp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Synchronous vectorized actor-critic trainer.
pub struct PpoTrainer<T: Scalar> {
    model: TitModel<T>,
    cfg: TrainConfig,
    env_kind: EnvKind,
    envs: Vec<Box<dyn Env>>,
    histories: Vec<ObservationHistory>,
    episode_returns: Vec<f64>,
    recent: VecDeque<f64>,
    rng: ChaCha8Rng,
    opt: Adam,
    env_steps: u64,
    updates: u64,
    grad_steps: u64,
    wall_clock: Option<Instant>,
}

impl<T: Scalar> PpoTrainer<T> {
    pub fn new(model: TitModel<T>, env_kind: EnvKind, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if mc.obs != env_kind.obs_shape() {
            return Err(TitError::config(
                "obs_shape",
                format!(
                    "model expects {}, {env_kind} emits {}",
                    mc.obs,
                    env_kind.obs_shape()
                ),
            ));
        }
        if mc.action != ActionSpec::Discrete(env_kind.action_count()) {
            return Err(TitError::config(
                "action_space",
                format!(
                    "model has {}, {env_kind} needs discrete:{}",
                    mc.action,
                    env_kind.action_count()
                ),
            ));
        }
        let context = mc.context_len;
        let obs_len = mc.obs.len();
        let mut trainer = Self {
            envs: (0..cfg.num_envs).map(|_| env_kind.make(0)).collect(),
            histories: (0..cfg.num_envs)
                .map(|_| ObservationHistory::new(context, obs_len))
                .collect::<Result<_>>()?,
            episode_returns: vec![0.0; cfg.num_envs],
            recent: VecDeque::with_capacity(RETURN_WINDOW),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SAMPLING_STREAM)),
            opt: Adam::new(cfg.learning_rate, cfg.adam_eps),
            env_steps: 0,
            updates: 0,
            grad_steps: 0,
            wall_clock: None,
            model,
            cfg,
            env_kind,
        };
        trainer.reset_envs(0)?;
        Ok(trainer)
    }

    /// Reseeds every environment for a (re)start at update `updates`.
    fn reset_envs(&mut self, updates: u64) -> Result<()> {
        let base = derive_seed(self.cfg.seed, ENV_STREAM + updates);
        for (e, (env, hist)) in self.envs.iter_mut().zip(&mut self.histories).enumerate() {
            hist.clear();
            hist.push(&env.reset(Some(derive_seed(base, e as u64))))?;
        }
        self.episode_returns.iter_mut().for_each(|r| *r = 0.0);
        Ok(())
    }

    /// Records elapsed seconds in the metrics instead of zeros.
    pub fn with_wall_clock(mut self, on: bool) -> Self {
        self.wall_clock = on.then(Instant::now);
        self
    }

    pub fn model(&self) -> &TitModel<T> {
        &self.model
    }

    pub fn into_model(self) -> TitModel<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_kind(&self) -> EnvKind {
        self.env_kind
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn finished(&self) -> bool {
        self.env_steps >= self.cfg.total_timesteps as u64
    }

    fn windows(&self) -> Vec<ObsWindow> {
        self.histories.iter().map(|h| h.window()).collect()
    }

    fn batch_of(&self, windows: &[ObsWindow]) -> Result<WindowBatch> {
        let mc = self.model.config();
        WindowBatch::from_windows(windows, mc.context_len, mc.obs.len())
    }

    /// Logits and values for a batch, dropout off.
    fn evaluate(&self, windows: &[ObsWindow]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let batch = self.batch_of(windows)?;
        let mut tape = Tape::new();
        let out = self
            .model
            .forward(&mut tape, &batch, ForwardOptions::default())?;
        let logits = tape.value(out.action);
        let logp = (0..logits.rows())
            .map(|r| log_softmax_row(logits.row(r)))
            .collect();
        let values = tape.value(out.value).to_f64();
        Ok((logp, values))
    }

    /// Steps every environment `rollout_len` times with sampled actions.
    pub fn collect_rollout(&mut self) -> Result<RolloutBuffer> {
        let e_n = self.cfg.num_envs;
        let gamma = self.cfg.gamma;
        let mut buf = RolloutBuffer::new(e_n, self.cfg.rollout_len);
        for _ in 0..self.cfg.rollout_len {
            let windows = self.windows();
            let (logp, values) = self.evaluate(&windows)?;
            let mut rewards = vec![0.0; e_n];
            let mut dones = vec![false; e_n];
            let mut actions = vec![0; e_n];
            let mut truncated = Vec::new();
            for e in 0..e_n {
                let a = sample_categorical(&logp[e], self.rng.random::<f64>());
                actions[e] = a;
                let r = self.envs[e].step(a)?;
                rewards[e] = r.reward as f64;
                self.episode_returns[e] += r.reward as f64;
                dones[e] = r.done();
                if r.truncated && !r.terminated {
                    let mut h = self.histories[e].clone();
                    h.push(&r.obs)?;
                    truncated.push((e, h.window()));
                }
                if r.done() {
                    if self.recent.len() == RETURN_WINDOW {
                        self.recent.pop_front();
                    }
                    self.recent.push_back(self.episode_returns[e]);
                    self.episode_returns[e] = 0.0;
                    self.histories[e].clear();
                    let obs = self.envs[e].reset(None);
                    self.histories[e].push(&obs)?;
                } else {
                    self.histories[e].push(&r.obs)?;
                }
            }
            if !truncated.is_empty() {
                let finals: Vec<ObsWindow> = truncated.iter().map(|(_, w)| w.clone()).collect();
                let (_, v) = self.evaluate(&finals)?;
                for ((e, _), v) in truncated.iter().zip(v) {
                    rewards[*e] += gamma * v;
                }
            }
            for (e, w) in windows.into_iter().enumerate() {
                buf.push(
                    w,
                    actions[e],
                    logp[e][actions[e]],
                    rewards[e],
                    values[e],
                    dones[e],
                )?;
            }
            self.env_steps += e_n as u64;
        }
        let (_, last_values) = self.evaluate(&self.windows())?;
        buf.finish(&last_values, gamma, self.cfg.gae_lambda)?;
        Ok(buf)
    }

    /// Runs `epochs` passes of shuffled minibatches over a finished buffer.
    pub fn update(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        if !buf.is_full() || buf.advantages.len() != buf.len() {
            return Err(TitError::Training(
                "update needs a full buffer with advantages".into(),
            ));
        }
        let mut adv = buf.advantages.clone();
        if self.cfg.normalize_advantages {
            normalize(&mut adv);
        }
        let mut order: Vec<usize> = (0..buf.len()).collect();
        let mut stats = UpdateStats::default();
        let dropout_base = derive_seed(self.cfg.seed, DROPOUT_STREAM);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for (mb, idx) in order.chunks(self.cfg.minibatch_size).enumerate() {
                let windows: Vec<ObsWindow> = idx.iter().map(|&i| buf.windows[i].clone()).collect();
                let batch = self.batch_of(&windows)?;
                let pick = |xs: &[f64]| idx.iter().map(|&i| xs[i]).collect::<Vec<f64>>();
                let actions: Vec<usize> = idx.iter().map(|&i| buf.actions[i]).collect();
                let mode = Mode::train(derive_seed(dropout_base, self.grad_steps));
                let mut tape = Tape::new();
                let diagnose = |e: TitError| {
                    TitError::Training(format!(
                        "non-finite loss at update {} epoch {epoch} minibatch {mb}: {e}",
                        self.updates + 1
                    ))
                };
                let loss = ppo_loss(
                    &mut tape,
                    &self.model,
                    self.model.params(),
                    &batch,
                    &actions,
                    &pick(&buf.log_probs),
                    &pick(&adv),
                    &pick(&buf.returns),
                    &self.cfg,
                    mode,
                )
                .map_err(diagnose)?;
                let grads = tape.backward(loss.total).map_err(diagnose)?;
                let store = self.model.params_mut();
                store.zero_grad();
                grads.accumulate_into(store);
                store.clip_grad_norm(T::from_f64_lossy(self.cfg.max_grad_norm));
                self.opt.step(store)?;
                self.grad_steps += 1;
                stats.policy_loss += tape.value(loss.policy).data()[0].as_f64();
                stats.value_loss += tape.value(loss.value).data()[0].as_f64();
                stats.entropy += tape.value(loss.entropy).data()[0].as_f64();
                stats.minibatches += 1;
            }
        }
        let n = stats.minibatches as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        self.updates += 1;
        Ok(stats)
    }

    /// Mean and population std of the most recent completed episodes.
    pub fn recent_returns(&self) -> (f64, f64) {
        if self.recent.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = self.recent.len() as f64;
        let mean = self.recent.iter().sum::<f64>() / n;
        let std = (self.recent.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, std)
    }

    /// One rollout plus one update.
    pub fn iterate(&mut self) -> Result<MetricsRow> {
        let buf = self.collect_rollout()?;
        let stats = self.update(&buf)?;
        let (mean_return, std_return) = self.recent_returns();
        Ok(MetricsRow {
            wall_clock_s: self.wall_clock.map_or(0.0, |t| t.elapsed().as_secs_f64()),
            env_steps: self.env_steps,
            updates: self.updates,
            mean_return,
            std_return,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
        })
    }

    /// Iterates until `total_timesteps` environment steps have been taken,
    /// handing every metrics row to `on_update`.
    pub fn train(
        &mut self,
        mut on_update: impl FnMut(&Self, &MetricsRow) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let row = self.iterate()?;
            on_update(self, &row)?;
        }
        Ok(())
    }

    /// Writes optimizer moments and counters next to a model checkpoint.
    /// Environments are reseeded on resume rather than restored.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::<T>::new();
        let (m, v) = self.opt.moments();
        for (i, p) in self.model.params().iter().enumerate() {
            for (kind, buf) in [("m", m.get(i)), ("v", v.get(i))] {
                let data = match buf {
                    Some(b) => b.iter().map(|&x| T::from_f64_lossy(x)).collect(),
                    None => vec![T::zero(); p.value.len()],
                };
                store.add(
                    format!("adam.{kind}.{}", p.name),
                    Tensor::new(p.value.shape().to_vec(), data)?,
                )?;
            }
        }
        let recent: Vec<String> = self.recent.iter().map(|r| r.to_string()).collect();
        let meta = format!(
            "env_steps = {}\nupdates = {}\ngrad_steps = {}\nadam_steps = {}\nrng_word_pos = {}\nrecent = {}\n",
            self.env_steps,
            self.updates,
            self.grad_steps,
            self.opt.steps(),
            self.rng.get_word_pos(),
            recent.join(";"),
        );
        let mut w = BufWriter::new(File::create(path)?);
        write_weights(&mut w, &store, &meta)?;
        w.flush()?;
        Ok(())
    }

    /// Continues from a model checkpoint and a state file written by
    /// [`PpoTrainer::save_state`].
    pub fn resume(
        model: TitModel<T>,
        env_kind: EnvKind,
        cfg: TrainConfig,
        state: &Path,
    ) -> Result<Self> {
        let (store, meta) = read_weights::<T, _>(&mut BufReader::new(File::open(state)?))?;
        let mut trainer = Self::new(model, env_kind, cfg)?;
        let field = |key: &str| -> Result<&str> {
            meta.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| TitError::Format(format!("trainer state lacks {key}")))
        };
        let number = |key: &str| -> Result<u64> {
            field(key)?
                .parse()
                .map_err(|_| TitError::Format(format!("trainer state has a bad {key}")))
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in trainer.model.params().iter() {
            for (kind, out) in [("m", &mut m), ("v", &mut v)] {
                let id = store
                    .find(&format!("adam.{kind}.{}", p.name))
                    .ok_or_else(|| {
                        TitError::Format(format!("trainer state lacks moments for {}", p.name))
                    })?;
                out.push(store.value(id).to_f64());
            }
        }
        trainer.opt.restore(number("adam_steps")?, m, v)?;
        trainer.env_steps = number("env_steps")?;
        trainer.updates = number("updates")?;
        trainer.grad_steps = number("grad_steps")?;
        let pos: u128 = field("rng_word_pos")?
            .parse()
            .map_err(|_| TitError::Format("trainer state has a bad rng_word_pos".into()))?;
        trainer.rng.set_word_pos(pos);
        for r in field("recent")?.split(';').filter(|s| !s.is_empty()) {
            let r = r
                .parse()
                .map_err(|_| TitError::Format("trainer state has a bad recent return".into()))?;
            trainer.recent.push_back(r);
        }
        trainer.reset_envs(trainer.updates)?;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests;
