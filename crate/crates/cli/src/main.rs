use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tit_core::envs::EnvKind;
use tit_core::experiment::{
    cmd_ablate, cmd_collect, cmd_dt_train, cmd_eval, cmd_flows, cmd_train, cmd_visualize,
    parse_pairs, CollectPolicy, RunConfig,
};
use tit_core::training::MetricsRow;
use tit_core::{Result, TitError};

#[derive(Parser)]
#[command(
    name = "tit",
    version,
    about = "Transformer-in-Transformer policies for small RL environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set embed_dim=64`. Repeatable; applied
    /// after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(path) => parse_pairs(&std::fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| TitError::config(o.clone(), "expected KEY=VALUE"))?;
            pairs.retain(|(key, _)| key != k.trim());
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::from_pairs(&pairs)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Expert,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one policy per seed, then evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue each seed from its saved checkpoint.
        #[arg(long)]
        resume: bool,
        /// Run seeds on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Evaluate a policy checkpoint greedily.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `eval.csv` and `result.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant under one budget.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Count information flows of both wirings.
    Flows {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        context: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export attention maps of a checkpoint as CSV and PNG.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: EnvKind,
        /// Greedy steps to play before capturing.
        #[arg(long, default_value_t = 0)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record episodes for offline training.
    Collect {
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "expert")]
        policy: Policy,
        /// Use a trained policy instead of `--policy`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the return-conditioned sequence model on recorded episodes.
    DtTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn report_row(seed: u64, row: &MetricsRow) {
    println!(
        "seed {seed} steps {} updates {} mean_return {:.2} policy_loss {:.4} value_loss {:.4} entropy {:.4}",
        row.env_steps, row.updates, row.mean_return, row.policy_loss, row.value_loss, row.entropy
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { cfg } => print!("{}", cfg.load()?.echo()),
        Command::Train {
            cfg,
            resume,
            parallel,
        } => {
            let cfg = cfg.load()?;
            for o in cmd_train(&cfg, resume, parallel, &report_row)? {
                println!(
                    "seed {} eval episodes {} mean {} std {} -> {}",
                    o.seed,
                    o.report.episodes,
                    o.report.mean,
                    o.report.std,
                    o.dir.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            out,
        } => {
            let r = cmd_eval(&checkpoint, env, episodes, seed, out.as_deref())?;
            println!("episodes {} mean {} std {}", r.episodes, r.mean, r.std);
        }
        Command::Ablate { cfg } => {
            let cfg = cfg.load()?;
            let rows = cmd_ablate(&cfg, &report_row)?;
            println!("{:<9} {:>10} {:>10}", "variant", "mean", "std");
            for r in rows {
                println!(
                    "{:<9} {:>10.2} {:>10.2}",
                    r.variant.to_string(),
                    r.mean,
                    r.std
                );
            }
        }
        Command::Flows {
            layers,
            context,
            csv,
        } => {
            let (table, text) = cmd_flows(layers, context)?;
            print!("{table}");
            if let Some(path) = csv {
                std::fs::write(path, text)?;
            }
        }
        Command::Visualize {
            checkpoint,
            env,
            warmup,
            seed,
            out,
        } => {
            for f in cmd_visualize(&checkpoint, env, warmup, seed, &out)?.files {
                println!("{}", f.display());
            }
        }
        Command::Collect {
            env,
            episodes,
            seed,
            policy,
            checkpoint,
            out,
        } => {
            let policy = match (checkpoint, policy) {
                (Some(p), _) => CollectPolicy::Checkpoint(p),
                (None, Policy::Expert) => CollectPolicy::Expert,
                (None, Policy::Random) => CollectPolicy::Random,
            };
            let trajs = cmd_collect(env, episodes, seed, &policy, &out)?;
            let total: f64 = trajs.iter().map(|t| t.total_return()).sum();
            println!(
                "wrote {} episodes ({} steps, mean return {}) to {}",
                trajs.len(),
                trajs.iter().map(|t| t.len()).sum::<usize>(),
                total / trajs.len() as f64,
                out.display()
            );
        }
        Command::DtTrain { cfg, dataset } => {
            let cfg = cfg.load()?;
            let p = cmd_dt_train(&cfg, Path::new(&dataset), &|p| {
                println!(
                    "step {} loss {:.4} accuracy {:.4}",
                    p.step, p.loss, p.accuracy
                )
            })?;
            println!("finished at step {} with accuracy {}", p.step, p.accuracy);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
