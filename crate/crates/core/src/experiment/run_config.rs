use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::config::parse_bool;
use crate::backbone::{ActionSpec, TitConfig};
use crate::envs::EnvKind;
use crate::error::{Result, TitError};
use crate::training::{DtTrainConfig, TrainConfig};

/// Everything one command needs: model, trainers, environment, outputs.
///
/// The text form is one `key = value` per line; `#` starts a comment and
/// blank lines are skipped. `obs_shape` and `action_space` default to the
/// environment's when not given.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Record elapsed seconds in metrics (breaks byte-identical reruns).
    pub wall_clock: bool,
    pub model: TitConfig,
    pub train: TrainConfig,
    pub dt: DtTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::CartPole,
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            wall_clock: false,
            model: TitConfig::default(),
            train: TrainConfig::default(),
            dt: DtTrainConfig::default(),
        }
    }
}

pub const RUN_KEYS: [&str; 4] = ["env", "output_dir", "seeds", "wall_clock"];

/// Splits config text into `(key, value)` pairs, rejecting malformed lines
/// and repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TitError::config(
                format!("line {}", n + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TitError::config(format!("line {}", n + 1), "missing key"));
        }
        if !seen.insert(k.to_string()) {
            return Err(TitError::config(k, "given more than once"));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds = value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| TitError::config("seeds", format!("invalid seed `{}`", s.trim())))
        })
        .collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(TitError::config("seeds", "needs at least one seed"));
    }
    Ok(seeds)
}

impl RunConfig {
    /// Builds a config from pairs; later pairs override earlier ones with the
    /// same key, which is how flags override a file.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let last = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        if let Some(env) = last("env") {
            cfg.env = env.parse()?;
        }
        cfg.model.obs = cfg.env.obs_shape();
        cfg.model.action = ActionSpec::Discrete(cfg.env.action_count());
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads a config file and applies `overrides` on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = value.parse()?,
            "output_dir" => {
                if value.is_empty() {
                    return Err(TitError::config(key, "must not be empty"));
                }
                self.output_dir = PathBuf::from(value)
            }
            "seeds" => self.seeds = parse_seeds(value)?,
            "wall_clock" => self.wall_clock = parse_bool(key, value)?,
            _ => {
                let known = self.model.set(key, value)?
                    || self.train.set(key, value)?
                    || self.dt.set(key, value)?;
                if !known {
                    return Err(TitError::config(key, "unknown key"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dt.validate()?;
        if self.model.obs != self.env.obs_shape() {
            return Err(TitError::config(
                "obs_shape",
                format!(
                    "{} emits {}, not {}",
                    self.env,
                    self.env.obs_shape(),
                    self.model.obs
                ),
            ));
        }
        if self.model.action != ActionSpec::Discrete(self.env.action_count()) {
            return Err(TitError::config(
                "action_space",
                format!("{} needs discrete:{}", self.env, self.env.action_count()),
            ));
        }
        Ok(())
    }

    /// Full effective configuration, re-parseable into an equal value.
    pub fn echo(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut out = String::from("# run\n");
        out += &format!("env = {}\n", self.env);
        out += &format!("output_dir = {}\n", self.output_dir.display());
        out += &format!("seeds = {}\n", seeds.join(","));
        out += &format!("wall_clock = {}\n", self.wall_clock);
        out += "# model\n";
        out += &self.model.to_record();
        let (rows, cols) = self.model.patch_grid();
        out += &format!(
            "# derived: num_patches = {} ({rows}x{cols})\n",
            self.model.num_patches()
        );
        out += "# online training\n";
        for k in TrainConfig::KEYS {
            out += &format!("{k} = {}\n", self.train.get(k).expect("known key"));
        }
        out += "# sequence model training\n";
        for k in DtTrainConfig::KEYS {
            out += &format!("{k} = {}\n", self.dt.get(k).expect("known key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_echo_round_trips() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echo = cfg.echo();
        assert!(echo.contains("embed_dim = 32\n"));
        assert_eq!(RunConfig::parse(&echo).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&echo).unwrap().echo(), echo);
    }

    #[test]
    fn environment_sets_observation_defaults() {
        let cfg = RunConfig::parse("env = dotcatcher\npatch_size = 6 # 4x4 grid\n").unwrap();
        assert_eq!(cfg.model.obs.to_string(), "24x24x1");
        assert_eq!(cfg.model.action, ActionSpec::Discrete(3));
        assert!(cfg.echo().contains("# derived: num_patches = 16 (4x4)"));
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn atari_patch_count_is_echoed() {
        // A frame the size of a preprocessed Atari screen; the env check is
        // what rejects it, after the patch arithmetic is validated.
        let mut model = TitConfig {
            obs: "84x84x1".parse().unwrap(),
            patch_size: 12,
            ..TitConfig::default()
        };
        model.validate().unwrap();
        assert_eq!(model.num_patches(), 49);
        let cfg = RunConfig {
            model: model.clone(),
            ..RunConfig::default()
        };
        assert!(cfg.echo().contains("# derived: num_patches = 49 (7x7)"));
        model.patch_size = 0;
        assert!(model.validate().is_err());
    }

    #[test]
    fn bad_input_names_the_key() {
        let key_of = |text: &str| match RunConfig::parse(text) {
            Err(TitError::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key_of("num_blocks = 0"), "num_blocks");
        assert_eq!(key_of("bogus = 1"), "bogus");
        assert_eq!(key_of("embed_dim = many"), "embed_dim");
        assert_eq!(key_of("env = dotcatcher\npatch_size = 5"), "patch_size");
        assert_eq!(key_of("env = pong"), "env");
        assert_eq!(key_of("seeds = 1,x"), "seeds");
        assert_eq!(key_of("gamma = 2"), "gamma");
        assert_eq!(key_of("embed_dim = 8\nembed_dim = 16"), "embed_dim");
        assert_eq!(key_of("obs_shape = 3"), "obs_shape");
        assert_eq!(key_of("just words"), "line 1");
    }

    #[test]
    fn later_pairs_override_earlier_ones() {
        let mut pairs = parse_pairs("embed_dim = 8\nseeds = 0,1,2,3,4\n").unwrap();
        pairs.push(("embed_dim".into(), "16".into()));
        let cfg = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }
}
