//! Seedable environments, the observation history buffer and the episode
//! record file.

pub mod cartpole;
pub mod dotcatcher;
pub mod history;
pub mod record;

use std::fmt;
use std::str::FromStr;

pub use cartpole::CartPole;
pub use dotcatcher::DotCatcher;
pub use history::ObservationHistory;
pub use record::{read_episodes, EpisodeHeader, EpisodeWriter, Trajectory, Transition};

use crate::backbone::ObsShape;
use crate::error::{Result, TitError};

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f32>,
    pub reward: f32,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Episodic environment with a discrete action set.
pub trait Env: Send {
    fn id(&self) -> EnvKind;

    fn obs_shape(&self) -> ObsShape;

    fn action_count(&self) -> usize;

    /// Starts a new episode. `Some(seed)` reseeds the generator first;
    /// `None` continues the current random stream.
    fn reset(&mut self, seed: Option<u64>) -> Vec<f32>;

    fn step(&mut self, action: usize) -> Result<StepResult>;

    /// Action of a scripted reference policy that may read hidden state.
    fn expert_action(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    CartPole,
    DotCatcher,
}

impl EnvKind {
    pub fn make(self, seed: u64) -> Box<dyn Env> {
        match self {
            EnvKind::CartPole => Box::new(CartPole::new(seed)),
            EnvKind::DotCatcher => Box::new(DotCatcher::new(seed)),
        }
    }

    pub fn obs_shape(self) -> ObsShape {
        match self {
            EnvKind::CartPole => ObsShape::Array { dim: 4 },
            EnvKind::DotCatcher => ObsShape::Image {
                height: dotcatcher::SIZE,
                width: dotcatcher::SIZE,
                channels: 1,
            },
        }
    }

    pub fn action_count(self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::DotCatcher => 3,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::DotCatcher => "dotcatcher",
        })
    }
}

impl FromStr for EnvKind {
    type Err = TitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvKind::CartPole),
            "dotcatcher" => Ok(EnvKind::DotCatcher),
            other => Err(TitError::config(
                "env",
                format!("unknown environment `{other}` (expected cartpole or dotcatcher)"),
            )),
        }
    }
}

pub(crate) fn invalid_action(env: EnvKind, action: usize) -> TitError {
    TitError::Env(format!(
        "{env}: invalid action {action} (expected < {})",
        env.action_count()
    ))
}
