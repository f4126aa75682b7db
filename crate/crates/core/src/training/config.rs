use crate::backbone::config::{parse_bool, parse_value};
use crate::error::{Result, TitError};

/// Knobs of the online actor-critic trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_timesteps: usize,
    pub num_envs: usize,
    /// Steps collected per environment between updates.
    pub rollout_len: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub learning_rate: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub normalize_advantages: bool,
    pub eval_episodes: usize,
    /// Seeds the model, the environments and action sampling. Run files
    /// set it from their seed list, so it has no key of its own.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 100_000,
            num_envs: 8,
            rollout_len: 32,
            minibatch_size: 256,
            epochs: 10,
            gamma: 0.98,
            gae_lambda: 0.8,
            clip_range: 0.2,
            learning_rate: 1e-3,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            normalize_advantages: true,
            eval_episodes: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "total_timesteps",
        "num_envs",
        "rollout_len",
        "minibatch_size",
        "epochs",
        "gamma",
        "gae_lambda",
        "clip_range",
        "learning_rate",
        "ent_coef",
        "vf_coef",
        "max_grad_norm",
        "adam_eps",
        "normalize_advantages",
        "eval_episodes",
    ];

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("total_timesteps", self.total_timesteps),
            ("num_envs", self.num_envs),
            ("rollout_len", self.rollout_len),
            ("minibatch_size", self.minibatch_size),
            ("epochs", self.epochs),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(TitError::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TitError::config(key, format!("{v} outside [0, 1]")));
            }
        }
        for (key, v) in [
            ("clip_range", self.clip_range),
            ("learning_rate", self.learning_rate),
            ("max_grad_norm", self.max_grad_norm),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TitError::config(key, format!("{v} must be positive")));
            }
        }
        for (key, v) in [("ent_coef", self.ent_coef), ("vf_coef", self.vf_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TitError::config(key, format!("{v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Samples per update.
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_len
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "total_timesteps" => self.total_timesteps = parse_value(key, value)?,
            "num_envs" => self.num_envs = parse_value(key, value)?,
            "rollout_len" => self.rollout_len = parse_value(key, value)?,
            "minibatch_size" => self.minibatch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "gae_lambda" => self.gae_lambda = parse_value(key, value)?,
            "clip_range" => self.clip_range = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "ent_coef" => self.ent_coef = parse_value(key, value)?,
            "vf_coef" => self.vf_coef = parse_value(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "normalize_advantages" => self.normalize_advantages = parse_bool(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "total_timesteps" => self.total_timesteps.to_string(),
            "num_envs" => self.num_envs.to_string(),
            "rollout_len" => self.rollout_len.to_string(),
            "minibatch_size" => self.minibatch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "gamma" => self.gamma.to_string(),
            "gae_lambda" => self.gae_lambda.to_string(),
            "clip_range" => self.clip_range.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "ent_coef" => self.ent_coef.to_string(),
            "vf_coef" => self.vf_coef.to_string(),
            "max_grad_norm" => self.max_grad_norm.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "normalize_advantages" => self.normalize_advantages.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            _ => return None,
        })
    }
}

/// Knobs of the offline return-conditioned trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct DtTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f64,
    /// Discount for returns-to-go; 1 is the usual convention.
    pub rtg_gamma: f64,
    pub max_grad_norm: f64,
    /// Stop once logged-action accuracy reaches this (1 disables early stop).
    pub target_accuracy: f64,
    /// Accuracy is measured every this many steps.
    pub eval_every: usize,
    pub episodes: usize,
}

impl Default for DtTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            rtg_scale: 8.0,
            rtg_gamma: 1.0,
            max_grad_norm: 1.0,
            target_accuracy: 0.95,
            eval_every: 25,
            episodes: 10,
        }
    }
}

impl DtTrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "dt_steps",
        "dt_batch_size",
        "dt_learning_rate",
        "dt_rtg_scale",
        "dt_rtg_gamma",
        "dt_max_grad_norm",
        "dt_target_accuracy",
        "dt_eval_every",
        "dt_episodes",
    ];

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("dt_steps", self.steps),
            ("dt_batch_size", self.batch_size),
            ("dt_eval_every", self.eval_every),
            ("dt_episodes", self.episodes),
        ] {
            if v == 0 {
                return Err(TitError::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [
            ("dt_learning_rate", self.learning_rate),
            ("dt_rtg_scale", self.rtg_scale),
            ("dt_max_grad_norm", self.max_grad_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TitError::config(key, format!("{v} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.rtg_gamma) {
            return Err(TitError::config("dt_rtg_gamma", "outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(TitError::config("dt_target_accuracy", "outside [0, 1]"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dt_steps" => self.steps = parse_value(key, value)?,
            "dt_batch_size" => self.batch_size = parse_value(key, value)?,
            "dt_learning_rate" => self.learning_rate = parse_value(key, value)?,
            "dt_rtg_scale" => self.rtg_scale = parse_value(key, value)?,
            "dt_rtg_gamma" => self.rtg_gamma = parse_value(key, value)?,
            "dt_max_grad_norm" => self.max_grad_norm = parse_value(key, value)?,
            "dt_target_accuracy" => self.target_accuracy = parse_value(key, value)?,
            "dt_eval_every" => self.eval_every = parse_value(key, value)?,
            "dt_episodes" => self.episodes = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dt_steps" => self.steps.to_string(),
            "dt_batch_size" => self.batch_size.to_string(),
            "dt_learning_rate" => self.learning_rate.to_string(),
            "dt_rtg_scale" => self.rtg_scale.to_string(),
            "dt_rtg_gamma" => self.rtg_gamma.to_string(),
            "dt_max_grad_norm" => self.max_grad_norm.to_string(),
            "dt_target_accuracy" => self.target_accuracy.to_string(),
            "dt_eval_every" => self.eval_every.to_string(),
            "dt_episodes" => self.episodes.to_string(),
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_round_trip() {
        let mut cfg = TrainConfig::default();
        for key in TrainConfig::KEYS {
            let v = cfg.get(key).unwrap();
            assert!(cfg.set(key, &v).unwrap());
        }
        assert_eq!(cfg, TrainConfig::default());
        let mut dt = DtTrainConfig::default();
        for key in DtTrainConfig::KEYS {
            let v = dt.get(key).unwrap();
            assert!(dt.set(key, &v).unwrap());
        }
        assert_eq!(dt, DtTrainConfig::default());
    }

    #[test]
    fn constraints_name_the_key() {
        let cfg = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TitError::Config { key, .. }) if key == "gamma"));
        let cfg = TrainConfig {
            clip_range: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
