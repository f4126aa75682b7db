//! Run configuration and the commands behind the `tit` binary.

pub mod commands;
pub mod run_config;
pub mod visualize;

pub use commands::{
    cmd_ablate, cmd_collect, cmd_dt_train, cmd_eval, cmd_flows, cmd_train, eval_seed, seed_dir,
    train_seed, AblationRow, CollectPolicy, Progress, SeedOutcome,
};
pub use run_config::{parse_pairs, RunConfig, RUN_KEYS};
pub use visualize::{cmd_visualize, write_heatmap_png, VisualizeOutput};
