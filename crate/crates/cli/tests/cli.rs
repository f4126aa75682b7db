use std::path::Path;
use std::process::{Command, Output};

fn tit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tit"))
        .args(args)
        .output()
        .expect("spawn tit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, env: &str) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    let text = format!(
        "env = {env}\noutput_dir = {}\nseeds = 0\nembed_dim = 8\nhead_hidden = 8\ncontext_len = 2\n\
         total_timesteps = 64\nnum_envs = 2\nrollout_len = 16\nminibatch_size = 16\nepochs = 1\neval_episodes = 2\n",
        dir.join("runs").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn flows_prints_both_wirings() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flows.csv");
    let o = tit(&[
        "flows",
        "--layers",
        "2",
        "--context",
        "4",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("vanilla") && out.contains("enhanced"), "{out}");
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.contains("enhanced,2,4,8,2,4,2,8,0"), "{text}");
}

#[test]
fn config_echo_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "cartpole");
    let o = tit(&[
        "config",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "embed_dim=16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(
        out.lines().any(|l| l.replace(' ', "") == "embed_dim=16"),
        "{out}"
    );
}

#[test]
fn unknown_key_reports_config_error() {
    let o = tit(&["config", "--set", "no_such_key=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}

#[test]
fn malformed_override_is_rejected() {
    let o = tit(&["config", "--set", "embed_dim"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = tit(&["flows", "--layers", "x", "--context", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "cartpole");
    let o = tit(&["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).starts_with("error[missing_checkpoint]"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn train_then_eval_and_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "cartpole");
    let o = tit(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("seed 0 eval episodes 2"),
        "{}",
        stdout(&o)
    );
    let seed_dir = dir.path().join("runs").join("seed_0");
    let metrics = std::fs::read_to_string(seed_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    let ckpt = seed_dir.join("model.titw");
    let out = dir.path().join("eval");
    let o = tit(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--env",
        "cartpole",
        "--episodes",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("episodes 3 mean"), "{}", stdout(&o));
    assert!(out.join("eval.csv").exists());

    let o = tit(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--env",
        "dotcatcher",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));

    let vis = dir.path().join("vis");
    let o = tit(&[
        "visualize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--env",
        "cartpole",
        "--out",
        vis.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().count() > 0);
}

#[test]
fn collect_then_dt_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("expert.tite");
    let o = tit(&[
        "collect",
        "--env",
        "dotcatcher",
        "--episodes",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("wrote 2 episodes"), "{}", stdout(&o));

    let cfg = tiny_config(dir.path(), "dotcatcher");
    let o = tit(&[
        "dt-train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "dt_steps=2",
        "--set",
        "dt_eval_every=1",
        "--dataset",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("finished at step"), "{}", stdout(&o));
}
