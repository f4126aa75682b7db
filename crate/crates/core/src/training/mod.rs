//! Online actor-critic training with a clipped surrogate objective, offline
//! return-conditioned training, and greedy evaluation.

pub mod config;
pub mod dt;
pub mod eval;
pub mod gae;
pub mod metrics;
pub mod optim;
pub mod ppo;

pub use config::{DtTrainConfig, TrainConfig};
pub use dt::{dt_accuracy, dt_loss, dt_train_step, train_dt, DtDataset, DtProgress};
pub use eval::{evaluate_policy, evaluate_with, greedy_actions, EvalReport};
pub use gae::{compute_gae, normalize, normalized_score, returns_to_go};
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};
pub use optim::Adam;
pub use ppo::{ppo_loss, PpoLoss, PpoTrainer, RolloutBuffer, UpdateStats};

/// Independent 64-bit seed for stream `tag` of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    crate::blocks::Mode::train(seed).site_seed(tag)
}
