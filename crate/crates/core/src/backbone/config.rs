use std::fmt;
use std::str::FromStr;

use crate::autodiff::ActivationKind;
use crate::error::{Result, TitError};

/// Shape of a single observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsShape {
    /// `height × width × channels`, stored row-major with channels last.
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Flat vector of `dim` entries.
    Array { dim: usize },
}

impl ObsShape {
    pub fn len(&self) -> usize {
        match *self {
            ObsShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            ObsShape::Array { dim } => dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_image(&self) -> bool {
        matches!(self, ObsShape::Image { .. })
    }

    /// The same observation with `k` frames stacked along channels.
    pub fn stacked(&self, k: usize) -> ObsShape {
        match *self {
            ObsShape::Image {
                height,
                width,
                channels,
            } => ObsShape::Image {
                height,
                width,
                channels: channels * k,
            },
            // Each entry stays one patch, now carrying k values.
            ObsShape::Array { dim } => ObsShape::Array { dim },
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ObsShape::Image {
                height,
                width,
                channels,
            } => vec![height, width, channels],
            ObsShape::Array { dim } => vec![dim],
        }
    }
}

impl fmt::Display for ObsShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObsShape::Image {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
            ObsShape::Array { dim } => write!(f, "{dim}"),
        }
    }
}

impl FromStr for ObsShape {
    type Err = TitError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TitError::config("obs_shape", format!("expected `D` or `HxWxC`, got `{s}`"));
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if parts.contains(&0) {
            return Err(TitError::config("obs_shape", "dimensions must be positive"));
        }
        match parts[..] {
            [dim] => Ok(ObsShape::Array { dim }),
            [height, width, channels] => Ok(ObsShape::Image {
                height,
                width,
                channels,
            }),
            _ => Err(bad()),
        }
    }
}

/// Action space of the policy head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpec {
    Discrete(usize),
    /// Gaussian policy with this many dimensions.
    Continuous(usize),
}

impl ActionSpec {
    /// Width of the policy head output.
    pub fn width(&self) -> usize {
        match *self {
            ActionSpec::Discrete(n) | ActionSpec::Continuous(n) => n,
        }
    }
}

impl fmt::Display for ActionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionSpec::Discrete(n) => write!(f, "discrete:{n}"),
            ActionSpec::Continuous(n) => write!(f, "continuous:{n}"),
        }
    }
}

impl FromStr for ActionSpec {
    type Err = TitError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            TitError::config(
                "action_space",
                format!("expected `discrete:N` or `continuous:N`, got `{s}`"),
            )
        };
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(TitError::config(
                "action_space",
                "action count must be positive",
            ));
        }
        match kind.trim() {
            "discrete" => Ok(ActionSpec::Discrete(n)),
            "continuous" => Ok(ActionSpec::Continuous(n)),
            _ => Err(bad()),
        }
    }
}

/// Backbone wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Full inner stack, then full outer stack.
    Vanilla,
    /// Inner and outer block interleaved per layer, dense head input.
    Enhanced,
    /// Enhanced wiring, head reads only the last layer.
    WoDense,
    /// Outer stack over linearly embedded whole observations.
    WoInner,
    /// Inner stack over channel-stacked history, no outer stack.
    WoOuter,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::Enhanced,
        Variant::WoDense,
        Variant::WoInner,
        Variant::WoOuter,
    ];

    pub fn has_inner(&self) -> bool {
        !matches!(self, Variant::WoInner)
    }

    pub fn has_outer(&self) -> bool {
        !matches!(self, Variant::WoOuter)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Enhanced => "enhanced",
            Variant::WoDense => "wo_dense",
            Variant::WoInner => "wo_inner",
            Variant::WoOuter => "wo_outer",
        })
    }
}

impl FromStr for Variant {
    type Err = TitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "enhanced" => Ok(Variant::Enhanced),
            "wo_dense" => Ok(Variant::WoDense),
            "wo_inner" => Ok(Variant::WoInner),
            "wo_outer" => Ok(Variant::WoOuter),
            other => Err(TitError::config(
                "variant",
                format!("unknown variant `{other}` (expected vanilla, enhanced, wo_dense, wo_inner or wo_outer)"),
            )),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TitConfig {
    pub obs: ObsShape,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub context_len: usize,
    pub inner_heads: usize,
    pub outer_heads: usize,
    pub inner_attn_dropout: f64,
    pub inner_ffn_dropout: f64,
    pub outer_attn_dropout: f64,
    pub outer_ffn_dropout: f64,
    pub activation: ActivationKind,
    pub variant: Variant,
    /// Learned temporal position table on the outer input.
    pub outer_position_encoding: bool,
    pub action: ActionSpec,
    /// Hidden width of the action head FFN.
    pub head_hidden: usize,
}

impl Default for TitConfig {
    fn default() -> Self {
        Self {
            obs: ObsShape::Array { dim: 4 },
            patch_size: 1,
            embed_dim: 32,
            num_blocks: 2,
            context_len: 1,
            inner_heads: 1,
            outer_heads: 1,
            inner_attn_dropout: 0.0,
            inner_ffn_dropout: 0.0,
            outer_attn_dropout: 0.0,
            outer_ffn_dropout: 0.0,
            activation: ActivationKind::Gelu,
            variant: Variant::Enhanced,
            outer_position_encoding: false,
            action: ActionSpec::Discrete(2),
            head_hidden: 64,
        }
    }
}

impl TitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("context_len", self.context_len),
            ("inner_heads", self.inner_heads),
            ("outer_heads", self.outer_heads),
            ("head_hidden", self.head_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(TitError::config(key, "must be at least 1"));
            }
        }
        if let ObsShape::Image { height, width, .. } = self.obs {
            if height % self.patch_size != 0 || width % self.patch_size != 0 {
                return Err(TitError::config(
                    "patch_size",
                    format!(
                        "{}x{} image is not divisible into {p}x{p} patches",
                        height,
                        width,
                        p = self.patch_size
                    ),
                ));
            }
        }
        for (key, heads) in [
            ("inner_heads", self.inner_heads),
            ("outer_heads", self.outer_heads),
        ] {
            if !self.embed_dim.is_multiple_of(heads) {
                return Err(TitError::config(
                    key,
                    format!("{heads} heads do not divide embed_dim {}", self.embed_dim),
                ));
            }
        }
        for (key, rate) in [
            ("inner_attn_dropout", self.inner_attn_dropout),
            ("inner_ffn_dropout", self.inner_ffn_dropout),
            ("outer_attn_dropout", self.outer_attn_dropout),
            ("outer_ffn_dropout", self.outer_ffn_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(TitError::config(key, format!("{rate} outside [0, 1)")));
            }
        }
        if self.action.width() == 0 {
            return Err(TitError::config(
                "action_space",
                "action count must be positive",
            ));
        }
        Ok(())
    }

    /// Patches per observation: `HW/P²` for images, `D` for arrays.
    pub fn num_patches(&self) -> usize {
        match self.obs {
            ObsShape::Image { height, width, .. } => {
                (height / self.patch_size) * (width / self.patch_size)
            }
            ObsShape::Array { dim } => dim,
        }
    }

    /// Observation shape the inner stack actually patchifies.
    pub fn inner_obs(&self) -> ObsShape {
        if self.variant == Variant::WoOuter {
            self.obs.stacked(self.context_len)
        } else {
            self.obs
        }
    }

    /// Length of one flattened patch: `P²·C` for images (`C` including
    /// stacked frames for `wo_outer`), 1 for arrays (`K` for `wo_outer`).
    pub fn patch_dim(&self) -> usize {
        let frames = if self.variant == Variant::WoOuter {
            self.context_len
        } else {
            1
        };
        self.obs_patch_dim() * frames
    }

    /// Patch length of a single, unstacked observation.
    pub fn obs_patch_dim(&self) -> usize {
        match self.obs {
            ObsShape::Image { channels, .. } => self.patch_size * self.patch_size * channels,
            ObsShape::Array { .. } => 1,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Width of the feature the heads consume.
    pub fn head_input_dim(&self) -> usize {
        match self.variant {
            Variant::Enhanced => self.num_blocks * self.embed_dim,
            _ => self.embed_dim,
        }
    }

    /// Grid of the inner attention map: `(H/P, W/P)` for images, `(1, D)`
    /// for arrays.
    pub fn patch_grid(&self) -> (usize, usize) {
        match self.obs {
            ObsShape::Image { height, width, .. } => {
                (height / self.patch_size, width / self.patch_size)
            }
            ObsShape::Array { dim } => (1, dim),
        }
    }
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| TitError::config(key, format!("invalid value `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(TitError::config(
            key,
            format!("expected true or false, got `{other}`"),
        )),
    }
}

impl TitConfig {
    /// Keys accepted by [`TitConfig::set`], in record order.
    pub const KEYS: [&'static str; 16] = [
        "obs_shape",
        "patch_size",
        "embed_dim",
        "num_blocks",
        "context_len",
        "inner_heads",
        "outer_heads",
        "inner_attn_dropout",
        "inner_ffn_dropout",
        "outer_attn_dropout",
        "outer_ffn_dropout",
        "activation",
        "variant",
        "outer_position_encoding",
        "action_space",
        "head_hidden",
    ];

    /// Assigns one field from its textual form. Returns `Ok(false)` for keys
    /// this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "obs_shape" => self.obs = value.trim().parse()?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "num_blocks" => self.num_blocks = parse_value(key, value)?,
            "context_len" => self.context_len = parse_value(key, value)?,
            "inner_heads" => self.inner_heads = parse_value(key, value)?,
            "outer_heads" => self.outer_heads = parse_value(key, value)?,
            "inner_attn_dropout" => self.inner_attn_dropout = parse_value(key, value)?,
            "inner_ffn_dropout" => self.inner_ffn_dropout = parse_value(key, value)?,
            "outer_attn_dropout" => self.outer_attn_dropout = parse_value(key, value)?,
            "outer_ffn_dropout" => self.outer_ffn_dropout = parse_value(key, value)?,
            "activation" => self.activation = value.trim().parse()?,
            "variant" => self.variant = value.trim().parse()?,
            "outer_position_encoding" => self.outer_position_encoding = parse_bool(key, value)?,
            "action_space" => self.action = value.trim().parse()?,
            "head_hidden" => self.head_hidden = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "obs_shape" => self.obs.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "num_blocks" => self.num_blocks.to_string(),
            "context_len" => self.context_len.to_string(),
            "inner_heads" => self.inner_heads.to_string(),
            "outer_heads" => self.outer_heads.to_string(),
            "inner_attn_dropout" => self.inner_attn_dropout.to_string(),
            "inner_ffn_dropout" => self.inner_ffn_dropout.to_string(),
            "outer_attn_dropout" => self.outer_attn_dropout.to_string(),
            "outer_ffn_dropout" => self.outer_ffn_dropout.to_string(),
            "activation" => self.activation.to_string(),
            "variant" => self.variant.to_string(),
            "outer_position_encoding" => self.outer_position_encoding.to_string(),
            "action_space" => self.action.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            _ => return None,
        })
    }

    /// `key = value` lines for every field.
    pub fn to_record(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses a record written by [`TitConfig::to_record`]. Lines with keys
    /// this type does not own are ignored.
    pub fn from_record(text: &str) -> Result<Self> {
        let mut cfg = TitConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TitError::Format(format!("malformed record line `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atari_patch_count() {
        let cfg = TitConfig {
            obs: "84x84x1".parse().unwrap(),
            patch_size: 12,
            ..TitConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 49);
        assert_eq!(cfg.patch_dim(), 144);
        assert_eq!(cfg.patch_grid(), (7, 7));
    }

    #[test]
    fn rejects_indivisible_image() {
        let cfg = TitConfig {
            obs: "84x84x1".parse().unwrap(),
            patch_size: 10,
            ..TitConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TitError::Config { key, .. }) if key == "patch_size"));
    }

    #[test]
    fn wo_outer_stacks_frames_into_patches() {
        let cfg = TitConfig {
            obs: "84x84x1".parse().unwrap(),
            patch_size: 12,
            context_len: 4,
            variant: Variant::WoOuter,
            ..TitConfig::default()
        };
        assert_eq!(cfg.patch_dim(), 12 * 12 * 4);
    }

    #[test]
    fn head_input_widths() {
        let mut cfg = TitConfig {
            num_blocks: 3,
            ..TitConfig::default()
        };
        assert_eq!(cfg.head_input_dim(), 3 * cfg.embed_dim);
        cfg.variant = Variant::WoDense;
        assert_eq!(cfg.head_input_dim(), cfg.embed_dim);
    }

    #[test]
    fn parse_display_round_trip() {
        for v in ["vanilla", "enhanced", "wo_dense", "wo_inner", "wo_outer"] {
            assert_eq!(v.parse::<Variant>().unwrap().to_string(), v);
        }
        assert!("dense".parse::<Variant>().is_err());
        assert_eq!(
            "discrete:3".parse::<ActionSpec>().unwrap(),
            ActionSpec::Discrete(3)
        );
        assert_eq!(
            "24x24x1".parse::<ObsShape>().unwrap().to_string(),
            "24x24x1"
        );
        assert!("24x24".parse::<ObsShape>().is_err());
    }

    #[test]
    fn record_round_trip() {
        let cfg = TitConfig {
            obs: "24x24x1".parse().unwrap(),
            patch_size: 6,
            inner_attn_dropout: 0.1,
            outer_ffn_dropout: 1.0 / 3.0,
            activation: ActivationKind::Relu,
            variant: Variant::WoInner,
            outer_position_encoding: true,
            action: ActionSpec::Continuous(3),
            ..TitConfig::default()
        };
        assert_eq!(TitConfig::from_record(&cfg.to_record()).unwrap(), cfg);
    }
}
