use super::*;
use crate::autodiff::finite_difference_check;
use crate::backbone::{TitConfig, Variant};

fn tiny_cartpole(variant: Variant, context: usize) -> TitConfig {
    TitConfig {
        embed_dim: 8,
        num_blocks: 2,
        context_len: context,
        head_hidden: 8,
        variant,
        ..TitConfig::default()
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        total_timesteps: 64,
        num_envs: 2,
        rollout_len: 16,
        minibatch_size: 8,
        epochs: 2,
        eval_episodes: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn window_batch(obs: &[f32], n: usize) -> WindowBatch {
    WindowBatch::new(obs.to_vec(), vec![true; n], n, 1, 4).unwrap()
}

fn log_probs<T: Scalar>(model: &TitModel<T>, batch: &WindowBatch, actions: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, batch, ForwardOptions::default())
        .unwrap();
    let logits = tape.value(out.action);
    actions
        .iter()
        .enumerate()
        .map(|(r, &a)| log_softmax_row(logits.row(r))[a])
        .collect()
}

const OBS: [f32; 12] = [
    0.01, -0.2, 0.03, 0.4, -0.5, 0.6, 0.07, -0.08, 0.9, 0.1, -0.11, 0.12,
];

#[test]
fn unchanged_policy_with_zero_advantages_has_zero_policy_loss() {
    let model = TitModel::<f64>::new(tiny_cartpole(Variant::Enhanced, 1), 1).unwrap();
    let batch = window_batch(&OBS, 3);
    let actions = [0, 1, 1];
    let old = log_probs(&model, &batch, &actions);
    let mut tape = Tape::new();
    let loss = ppo_loss(
        &mut tape,
        &model,
        model.params(),
        &batch,
        &actions,
        &old,
        &[0.0; 3],
        &[1.0; 3],
        &TrainConfig::default(),
        Mode::EVAL,
    )
    .unwrap();
    assert_eq!(tape.value(loss.policy).data()[0], 0.0);
}

#[test]
fn large_ratio_is_clipped() {
    assert!((clipped_objective(10.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
    assert_eq!(clipped_objective(10.0, -1.0, 0.2), -10.0);
    assert_eq!(clipped_objective(0.1, 1.0, 0.2), 0.1);

    // Same through the tape: old log-probability set so the ratio is 10.
    let model = TitModel::<f64>::new(tiny_cartpole(Variant::Enhanced, 1), 1).unwrap();
    let batch = window_batch(&OBS[..4], 1);
    let old: Vec<f64> = log_probs(&model, &batch, &[1])
        .iter()
        .map(|lp| lp - 10f64.ln())
        .collect();
    let mut tape = Tape::new();
    let loss = ppo_loss(
        &mut tape,
        &model,
        model.params(),
        &batch,
        &[1],
        &old,
        &[1.0],
        &[0.0],
        &TrainConfig::default(),
        Mode::EVAL,
    )
    .unwrap();
    assert!((tape.value(loss.policy).data()[0] + 1.2).abs() < 1e-12);
}

#[test]
fn entropy_of_near_uniform_policy_is_near_ln_two() {
    // The output layer starts near zero, so the initial policy is close to
    // uniform over the two actions.
    let model = TitModel::<f64>::new(tiny_cartpole(Variant::Enhanced, 1), 1).unwrap();
    let batch = window_batch(&OBS, 3);
    let mut tape = Tape::new();
    let loss = ppo_loss(
        &mut tape,
        &model,
        model.params(),
        &batch,
        &[0, 0, 0],
        &[0.0; 3],
        &[0.0; 3],
        &[0.0; 3],
        &TrainConfig::default(),
        Mode::EVAL,
    )
    .unwrap();
    assert!((tape.value(loss.entropy).data()[0] - 2f64.ln()).abs() < 1e-3);
}

fn loss_gradcheck<T: Scalar>(h: f64, tol: f64) -> f64 {
    let cfg = TrainConfig {
        ent_coef: 0.01,
        ..TrainConfig::default()
    };
    let mut model = TitModel::<T>::new(tiny_cartpole(Variant::Enhanced, 2), 7).unwrap();
    // Init-scale tokens are so small that layer norm turns a step of h into
    // a large relative change; spread the values out first.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = T::from_f64_lossy(rng.random_range(-0.8..0.8));
        }
    }
    let obs: Vec<f32> = OBS.iter().chain(&OBS[..4]).copied().collect();
    let batch = WindowBatch::new(obs, vec![false, true, true, true], 2, 2, 4).unwrap();
    let actions = [1, 0];
    // Ratios of e^{0.1} and e^{-0.5}: one inside the clip range, one beyond
    // it, neither on a clip boundary.
    let old: Vec<f64> = log_probs(&model, &batch, &actions)
        .iter()
        .zip([-0.1, 0.5])
        .map(|(lp, s)| lp + s)
        .collect();
    let mut store = model.params().clone();
    let report = finite_difference_check(
        &mut store,
        |tape, s| {
            let loss = ppo_loss(
                tape,
                &model,
                s,
                &batch,
                &actions,
                &old,
                &[1.3, -0.7],
                &[0.5, -0.2],
                &cfg,
                Mode::EVAL,
            )?;
            Ok(loss.total)
        },
        h,
        tol,
    )
    .unwrap();
    assert!(report.passed, "{}: {:?}", T::NAME, report.worst());
    report.max_rel_error
}

#[test]
fn full_loss_matches_finite_differences() {
    loss_gradcheck::<f64>(1e-5, 1e-6);
    loss_gradcheck::<f32>(1e-3, 1e-2);
}

#[test]
fn buffer_advantages_are_per_environment() {
    let mut buf = RolloutBuffer::new(2, 2);
    let w = ObsWindow::single(&[0.0; 4]);
    // env 0: rewards 1, 1; env 1: rewards 0, 2 with an episode end at t=0.
    buf.push(w.clone(), 0, 0.0, 1.0, 0.0, false).unwrap();
    buf.push(w.clone(), 0, 0.0, 0.0, 0.0, true).unwrap();
    buf.push(w.clone(), 0, 0.0, 1.0, 0.0, false).unwrap();
    buf.push(w.clone(), 0, 0.0, 2.0, 0.0, false).unwrap();
    assert!(buf.push(w, 0, 0.0, 0.0, 0.0, false).is_err());
    buf.finish(&[10.0, 0.0], 1.0, 1.0).unwrap();
    assert_eq!(buf.advantages, vec![12.0, 0.0, 11.0, 2.0]);
}

#[test]
fn trainer_runs_and_is_deterministic() {
    let run = || {
        let model = TitModel::<f32>::new(tiny_cartpole(Variant::Enhanced, 2), 3).unwrap();
        let mut trainer = PpoTrainer::new(model, EnvKind::CartPole, quick_cfg()).unwrap();
        let mut rows = Vec::new();
        trainer
            .train(|_, row| {
                rows.push(row.clone());
                Ok(())
            })
            .unwrap();
        (rows, trainer.into_model().params().snapshot())
    };
    let (rows, params) = run();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].env_steps, 64);
    assert!(rows
        .iter()
        .all(|r| r.policy_loss.is_finite() && r.value_loss.is_finite() && r.entropy > 0.0));
    assert_eq!(rows[0].wall_clock_s, 0.0);
    let (again, params_again) = run();
    assert_eq!(format!("{rows:?}"), format!("{again:?}"));
    assert_eq!(params, params_again);
}

#[test]
fn trainer_rejects_mismatched_model() {
    let cfg = TitConfig {
        obs: crate::backbone::ObsShape::Array { dim: 3 },
        ..tiny_cartpole(Variant::Enhanced, 1)
    };
    let model = TitModel::<f32>::new(cfg, 0).unwrap();
    assert!(PpoTrainer::new(model, EnvKind::CartPole, quick_cfg()).is_err());
    let bad = TrainConfig {
        gae_lambda: -0.1,
        ..quick_cfg()
    };
    let model = TitModel::<f32>::new(tiny_cartpole(Variant::Enhanced, 1), 0).unwrap();
    assert!(PpoTrainer::new(model, EnvKind::CartPole, bad).is_err());
}

#[test]
fn state_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = TitModel::<f32>::new(tiny_cartpole(Variant::Vanilla, 1), 3).unwrap();
    let mut trainer = PpoTrainer::new(model, EnvKind::CartPole, quick_cfg()).unwrap();
    trainer.iterate().unwrap();
    let ckpt = dir.path().join("model.titw");
    let state = dir.path().join("state.titw");
    trainer.model().save(&ckpt).unwrap();
    trainer.save_state(&state).unwrap();
    let resumed = PpoTrainer::resume(
        TitModel::<f32>::load(&ckpt).unwrap(),
        EnvKind::CartPole,
        quick_cfg(),
        &state,
    )
    .unwrap();
    assert_eq!(resumed.env_steps(), trainer.env_steps());
    assert_eq!(resumed.updates(), 1);
    assert_eq!(
        resumed.model().params().snapshot(),
        trainer.model().params().snapshot()
    );
    let mut resumed = resumed;
    let row = resumed.iterate().unwrap();
    assert_eq!(row.env_steps, 64);
    assert!(resumed.finished());
    assert!(PpoTrainer::resume(
        TitModel::<f32>::load(&ckpt).unwrap(),
        EnvKind::CartPole,
        quick_cfg(),
        &dir.path().join("missing.titw")
    )
    .is_err());
}
