use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::run_config::RunConfig;
use crate::backbone::{count_information_flows, DtModel, TitModel, Variant};
use crate::envs::{
    read_episodes, EnvKind, EpisodeHeader, EpisodeWriter, ObservationHistory, Trajectory,
    Transition,
};
use crate::error::{Result, TitError};
use crate::training::{
    derive_seed, evaluate_policy, greedy_actions, train_dt, DtDataset, DtProgress, EvalReport,
    MetricsRow, MetricsWriter, PpoTrainer,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.titw";
pub const STATE_FILE: &str = "state.titw";
pub const EVAL_FILE: &str = "eval.csv";
pub const RESULT_FILE: &str = "result.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const DT_MODEL_FILE: &str = "dt_model.titw";
pub const DT_METRICS_FILE: &str = "dt_metrics.csv";

/// Checkpoints are refreshed every this many updates, and at the end.
const CHECKPOINT_EVERY: u64 = 10;
/// Stream tag for evaluation episode seeds.
const EVAL_STREAM: u64 = 3;

/// Progress callback: seed and the metrics row of one update.
pub type Progress<'a> = &'a (dyn Fn(u64, &MetricsRow) + Sync);

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Seed of the evaluation episodes for a training seed.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, EVAL_STREAM)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes `episode,return` rows for every evaluation episode.
pub fn write_eval(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "return"])?;
    for (i, r) in report.returns.iter().enumerate() {
        w.write_record([i.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the one-row `seed,episodes,mean,std` summary of an evaluation.
pub fn write_result(path: &Path, seed: u64, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "episodes", "mean", "std"])?;
    w.write_record([
        seed.to_string(),
        report.episodes.to_string(),
        report.mean.to_string(),
        report.std.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Trains and evaluates one seed, writing everything under its seed
/// directory. With `resume` the run continues from the saved checkpoint.
pub fn train_seed(
    cfg: &RunConfig,
    seed: u64,
    resume: bool,
    progress: Progress,
) -> Result<SeedOutcome> {
    let dir = seed_dir(&cfg.output_dir, seed);
    fs::create_dir_all(&dir)?;
    let train_cfg = crate::training::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (model_path, state_path, metrics_path) = (
        dir.join(MODEL_FILE),
        dir.join(STATE_FILE),
        dir.join(METRICS_FILE),
    );
    let (mut trainer, file) = if resume {
        for p in [&model_path, &state_path] {
            if !p.exists() {
                return Err(TitError::MissingCheckpoint(p.clone()));
            }
        }
        let model = TitModel::<f32>::load(&model_path)?;
        if model.config() != &cfg.model {
            return Err(TitError::config(
                "checkpoint",
                format!(
                    "{} was trained with a different model config",
                    model_path.display()
                ),
            ));
        }
        let trainer = PpoTrainer::resume(model, cfg.env, train_cfg, &state_path)?;
        let file = OpenOptions::new().append(true).open(&metrics_path)?;
        (trainer, MetricsWriter::continuing(BufWriter::new(file)))
    } else {
        let model = TitModel::<f32>::new(cfg.model.clone(), seed)?;
        let trainer = PpoTrainer::new(model, cfg.env, train_cfg)?;
        (
            trainer,
            MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?)),
        )
    };
    write_text(&dir.join(CONFIG_FILE), &cfg.echo())?;
    trainer = trainer.with_wall_clock(cfg.wall_clock);
    let mut metrics = file;
    trainer.train(|t, row| {
        metrics.write(row)?;
        progress(seed, row);
        if row.updates % CHECKPOINT_EVERY == 0 || t.finished() {
            t.model().save(&model_path)?;
            t.save_state(&state_path)?;
        }
        Ok(())
    })?;
    metrics.into_inner()?.flush()?;
    trainer.model().save(&model_path)?;
    trainer.save_state(&state_path)?;
    let report = evaluate_policy(
        trainer.model(),
        cfg.env,
        cfg.train.eval_episodes,
        eval_seed(seed),
    )?;
    write_eval(&dir.join(EVAL_FILE), &report)?;
    write_result(&dir.join(RESULT_FILE), seed, &report)?;
    Ok(SeedOutcome { seed, dir, report })
}

/// Trains every seed of `cfg` (sequentially, or one thread per seed with
/// `parallel`) and writes a `results.csv` summary.
pub fn cmd_train(
    cfg: &RunConfig,
    resume: bool,
    parallel: bool,
    progress: Progress,
) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_FILE), &cfg.echo())?;
    let outcomes: Vec<SeedOutcome> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || train_seed(cfg, seed, resume, progress)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(TitError::Training("a seed worker panicked".into()))
                    })
                })
                .collect::<Result<_>>()
        })?
    } else {
        cfg.seeds
            .iter()
            .map(|&seed| train_seed(cfg, seed, resume, progress))
            .collect::<Result<_>>()?
    };
    let mut w = csv::Writer::from_path(cfg.output_dir.join(RESULTS_FILE))?;
    w.write_record(["seed", "episodes", "mean", "std"])?;
    for o in &outcomes {
        w.write_record([
            o.seed.to_string(),
            o.report.episodes.to_string(),
            o.report.mean.to_string(),
            o.report.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(outcomes)
}

fn check_env(model: &crate::backbone::TitConfig, env: EnvKind) -> Result<()> {
    if model.obs != env.obs_shape() {
        return Err(TitError::config(
            "obs_shape",
            format!(
                "checkpoint expects {}, {env} emits {}",
                model.obs,
                env.obs_shape()
            ),
        ));
    }
    Ok(())
}

/// Greedy evaluation of a checkpoint; with `out` the per-episode returns
/// and the summary are written there.
pub fn cmd_eval(
    checkpoint: &Path,
    env: EnvKind,
    episodes: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let model = TitModel::<f32>::load(checkpoint)?;
    check_env(model.config(), env)?;
    if episodes == 0 {
        return Err(TitError::config("episodes", "must be at least 1"));
    }
    let report = evaluate_policy(&model, env, episodes, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_eval(&dir.join(EVAL_FILE), &report)?;
        write_result(&dir.join(RESULT_FILE), seed, &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean: f64,
    pub std: f64,
}

/// Trains each ablation variant with the first seed and the same budget,
/// then writes the `variant,mean,std` table.
pub fn cmd_ablate(cfg: &RunConfig, progress: Progress) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    fs::create_dir_all(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_FILE), &cfg.echo())?;
    let mut rows = Vec::new();
    for variant in Variant::ABLATIONS {
        let model_cfg = crate::backbone::TitConfig {
            variant,
            ..cfg.model.clone()
        };
        let model = TitModel::<f32>::new(model_cfg, seed)?;
        let train_cfg = crate::training::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let mut trainer =
            PpoTrainer::new(model, cfg.env, train_cfg)?.with_wall_clock(cfg.wall_clock);
        let path = cfg
            .output_dir
            .join(format!("ablation_{variant}_{METRICS_FILE}"));
        let mut metrics = MetricsWriter::new(BufWriter::new(File::create(path)?));
        trainer
            .train(|_, row| {
                metrics.write(row)?;
                progress(seed, row);
                Ok(())
            })
            .map_err(|e| TitError::Training(format!("{variant}: {e}")))?;
        metrics.into_inner()?.flush()?;
        let report = evaluate_policy(
            trainer.model(),
            cfg.env,
            cfg.train.eval_episodes,
            eval_seed(seed),
        )?;
        rows.push(AblationRow {
            variant,
            mean: report.mean,
            std: report.std,
        });
    }
    let mut w = csv::Writer::from_path(cfg.output_dir.join(ABLATION_FILE))?;
    w.write_record(["variant", "mean", "std"])?;
    for r in &rows {
        w.write_record([r.variant.to_string(), r.mean.to_string(), r.std.to_string()])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Human-readable table and CSV twin of the flow counts of both wirings.
pub fn cmd_flows(layers: usize, context: usize) -> Result<(String, String)> {
    let header = crate::backbone::FlowCounts::CSV_HEADER;
    let mut table = format!(
        "{:<9} {:>3} {:>3} {:>8} {:>9} {:>5} {:>5} {:>5} {:>5}\n",
        header[0],
        header[1],
        header[2],
        header[3],
        header[4],
        header[5],
        header[6],
        header[7],
        header[8]
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for variant in [Variant::Vanilla, Variant::Enhanced] {
        let c = count_information_flows(layers, context, variant)?.as_array();
        table += &format!(
            "{:<9} {:>3} {:>3} {:>8} {:>9} {:>5} {:>5} {:>5} {:>5}\n",
            variant.to_string(),
            layers,
            context,
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5]
        );
        let mut record = vec![variant.to_string(), layers.to_string(), context.to_string()];
        record.extend(c.iter().map(|x| x.to_string()));
        w.write_record(&record)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| TitError::Io(e.into_error()))?)
        .expect("csv output is UTF-8");
    Ok((table, csv))
}

/// Which policy generates collected episodes.
#[derive(Clone, Debug, PartialEq)]
pub enum CollectPolicy {
    /// The environment's scripted reference policy.
    Expert,
    /// Uniform random actions.
    Random,
    /// Greedy actions of a trained policy checkpoint.
    Checkpoint(PathBuf),
}

/// Records `episodes` episodes of `env` into an episode file. Episode `i`
/// is reset with a seed derived from `(seed, i)`.
pub fn cmd_collect(
    env: EnvKind,
    episodes: usize,
    seed: u64,
    policy: &CollectPolicy,
    out: &Path,
) -> Result<Vec<Trajectory>> {
    if episodes == 0 {
        return Err(TitError::config("episodes", "must be at least 1"));
    }
    let model = match policy {
        CollectPolicy::Checkpoint(p) => {
            let m = TitModel::<f32>::load(p)?;
            check_env(m.config(), env)?;
            Some(m)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let obs_len = env.obs_shape().len();
    let mut trajectories = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut e = env.make(0);
        let mut obs = e.reset(Some(derive_seed(seed, 100 + i as u64)));
        let context = model.as_ref().map_or(1, |m| m.config().context_len);
        let mut hist = ObservationHistory::new(context, obs_len)?;
        hist.push(&obs)?;
        let mut traj = Trajectory::default();
        loop {
            let action = match (&model, policy) {
                (Some(m), _) => {
                    let batch = crate::backbone::WindowBatch::from_windows(
                        [&hist.window()],
                        context,
                        obs_len,
                    )?;
                    greedy_actions(m, &batch)?[0]
                }
                (None, CollectPolicy::Random) => rng.random_range(0..env.action_count()),
                (None, _) => e.expert_action(),
            };
            let r = e.step(action)?;
            traj.steps.push(Transition {
                obs,
                action,
                reward: r.reward,
                terminated: r.terminated,
                truncated: r.truncated,
            });
            if r.done() {
                break;
            }
            hist.push(&r.obs)?;
            obs = r.obs;
        }
        trajectories.push(traj);
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let header = EpisodeHeader {
        env_id: env.to_string(),
        obs_shape: env.obs_shape(),
        action_count: env.action_count(),
        seed,
    };
    let mut w = EpisodeWriter::new(BufWriter::new(File::create(out)?), &header)?;
    for (i, t) in trajectories.iter().enumerate() {
        w.write_trajectory(i as u32, t)?;
    }
    w.into_inner().flush()?;
    Ok(trajectories)
}

/// Trains the return-conditioned sequence model on an episode file, using
/// the first `dt_episodes` episodes. Writes the model and a
/// `step,loss,accuracy` log to the output directory.
pub fn cmd_dt_train(
    cfg: &RunConfig,
    dataset: &Path,
    progress: &dyn Fn(&DtProgress),
) -> Result<DtProgress> {
    cfg.validate()?;
    let (header, mut trajectories) = read_episodes(&mut BufReader::new(File::open(dataset)?))?;
    if header.env_id != cfg.env.to_string() {
        return Err(TitError::config(
            "env",
            format!(
                "dataset was recorded on {}, config says {}",
                header.env_id, cfg.env
            ),
        ));
    }
    trajectories.truncate(cfg.dt.episodes);
    let seed = cfg.seeds[0];
    let data = DtDataset::new(
        trajectories,
        cfg.model.context_len,
        cfg.env.obs_shape().len(),
        cfg.env.action_count(),
        &cfg.dt,
    )?;
    let mut model = DtModel::<f32>::new(cfg.model.clone(), seed)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_FILE), &cfg.echo())?;
    let mut log = csv::Writer::from_path(cfg.output_dir.join(DT_METRICS_FILE))?;
    log.write_record(["step", "loss", "accuracy"])?;
    let result = train_dt(&mut model, &data, &cfg.dt, seed, |p| {
        log.write_record([
            p.step.to_string(),
            p.loss.to_string(),
            p.accuracy.to_string(),
        ])?;
        log.flush()?;
        progress(p);
        Ok(())
    })?;
    model.save(&cfg.output_dir.join(DT_MODEL_FILE))?;
    Ok(result)
}
