//! Return-conditioned sequence model.
//!
//! Each timestep contributes three tokens, `(R̂_t, o_t, a_t)`. Returns and
//! actions are embedded linearly; an observation token is the inner
//! Transformer's class feature for that observation. The interleaved
//! sequence runs through the causal outer stack and the action for step `t`
//! is read at the position of `o_t`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ActionSpec, TitConfig};
use super::model::{
    capture_inner, checkpoint_meta, embed_and_tokenize, image_scale, inner_forward,
    read_checkpoint, register_blocks, settings, EmbedParams, ForwardOptions, HeadParams,
    TOKEN_INIT_STD,
};
use super::patch::patchify_into;
use super::AttentionMaps;
use crate::autodiff::weights::write_weights;
use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::blocks::{
    attention_records, decoder_block, init_linear, init_normal, BlockParams, SequenceLayout,
};
use crate::error::{Result, TitError};

const OUTER_SITE: u64 = 2001;

/// `B` sequences of `T` steps, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct DtBatch {
    pub batch: usize,
    pub steps: usize,
    /// Scaled returns-to-go, `B · T`.
    pub returns_to_go: Vec<f32>,
    /// `B · T · obs_len`.
    pub obs: Vec<f32>,
    /// `B · T · A`: one-hot rows for discrete actions.
    pub actions: Vec<f32>,
    /// Per-step validity; leading steps may be padding, the last never is.
    pub valid: Vec<bool>,
    /// Whether the final step's action token is part of the input.
    pub last_action_present: bool,
}

impl DtBatch {
    pub fn validate(&self, obs_len: usize, action_width: usize) -> Result<()> {
        if self.batch == 0 || self.steps == 0 {
            return Err(TitError::EmptyContext {
                op: "dt_sequence_forward",
            });
        }
        let bt = self.batch * self.steps;
        if self.returns_to_go.len() != bt
            || self.valid.len() != bt
            || self.obs.len() != bt * obs_len
            || self.actions.len() != bt * action_width
        {
            return Err(TitError::Shape {
                op: "dt_sequence_forward",
                lhs: vec![
                    self.returns_to_go.len(),
                    self.obs.len(),
                    self.actions.len(),
                    self.valid.len(),
                ],
                rhs: vec![self.batch, self.steps, obs_len, action_width],
            });
        }
        if let Some(b) = (0..self.batch).find(|b| !self.valid[b * self.steps + self.steps - 1]) {
            return Err(TitError::InvalidTensor(format!(
                "sequence {b}: the last step is invalid"
            )));
        }
        Ok(())
    }
}

/// Number of tokens the outer stack sees for `steps` timesteps.
pub fn dt_token_count(steps: usize, last_action_present: bool) -> usize {
    if steps == 0 {
        0
    } else {
        3 * steps - usize::from(!last_action_present)
    }
}

#[derive(Clone, Debug)]
pub struct DtOutput {
    /// [B·T × A]: prediction for every step, read at the step's observation
    /// token.
    pub action: Var,
    /// Output of the last outer block over all tokens, [B·n × D].
    pub tokens: Var,
    pub attention: AttentionMaps,
}

#[derive(Clone, Debug)]
pub struct DtParams {
    pub embed: EmbedParams,
    pub inner: Vec<BlockParams>,
    pub outer: Vec<BlockParams>,
    pub rtg_w: ParamId,
    pub rtg_b: ParamId,
    pub action_w: ParamId,
    pub action_b: ParamId,
    pub token_position: Option<ParamId>,
    pub head: HeadParams,
}

/// Sequence model over `(R̂, o, a)` tokens. `context_len` counts timesteps.
#[derive(Clone, Debug)]
pub struct DtModel<T: Scalar> {
    config: TitConfig,
    params: ParamStore<T>,
    handles: DtParams,
}

impl<T: Scalar> DtModel<T> {
    pub fn new(config: TitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !matches!(config.action, ActionSpec::Discrete(_)) {
            return Err(TitError::config(
                "action_space",
                "the sequence model predicts discrete actions",
            ));
        }
        let cfg = &config;
        let d = cfg.embed_dim;
        let a = cfg.action.width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = EmbedParams::register(
            &mut store,
            &mut rng,
            cfg.obs_patch_dim(),
            cfg.num_patches(),
            d,
        )?;
        let inner = register_blocks(&mut store, &mut rng, "inner", cfg, cfg.inner_heads)?;
        let outer = register_blocks(&mut store, &mut rng, "outer", cfg, cfg.outer_heads)?;
        let rtg_w = store.add("dt.rtg_w", init_linear(&mut rng, 1, d, 1.0))?;
        let rtg_b = store.add("dt.rtg_b", Tensor::zeros(&[1, d]))?;
        let action_w = store.add("dt.action_w", init_linear(&mut rng, a, d, 1.0))?;
        let action_b = store.add("dt.action_b", Tensor::zeros(&[1, d]))?;
        let token_position = if cfg.outer_position_encoding {
            Some(store.add(
                "dt.token_position",
                init_normal(&mut rng, &[3 * cfg.context_len, d], TOKEN_INIT_STD),
            )?)
        } else {
            None
        };
        let head =
            HeadParams::register(&mut store, &mut rng, d, cfg.head_hidden, cfg.action, false)?;
        Ok(Self {
            config,
            params: store,
            handles: DtParams {
                embed,
                inner,
                outer,
                rtg_w,
                rtg_b,
                action_w,
                action_b,
                token_position,
                head,
            },
        })
    }

    pub fn config(&self) -> &TitConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn handles(&self) -> &DtParams {
        &self.handles
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &DtBatch,
        opts: ForwardOptions,
    ) -> Result<DtOutput> {
        self.forward_with(&self.params, tape, batch, opts)
    }

    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        batch: &DtBatch,
        opts: ForwardOptions,
    ) -> Result<DtOutput> {
        let cfg = &self.config;
        let obs_len = cfg.obs.len();
        let a = cfg.action.width();
        batch.validate(obs_len, a)?;
        if batch.steps > cfg.context_len {
            return Err(TitError::Shape {
                op: "dt_sequence_forward",
                lhs: vec![batch.steps],
                rhs: vec![cfg.context_len],
            });
        }
        let h = &self.handles;
        let (b, t) = (batch.batch, batch.steps);
        let bt = b * t;
        let mut maps = AttentionMaps::default();

        // Observation tokens: class features of the inner stack.
        let scale = image_scale(cfg);
        let n = cfg.num_patches();
        let mut data = Vec::with_capacity(bt * n * cfg.obs_patch_dim());
        for i in 0..bt {
            patchify_into(
                &batch.obs[i * obs_len..(i + 1) * obs_len],
                cfg.obs,
                cfg.patch_size,
                scale,
                &mut data,
            )?;
        }
        let patches = tape.constant(Tensor::new(vec![bt * n, cfg.obs_patch_dim()], data)?)?;
        let z0 = embed_and_tokenize(tape, store, patches, &h.embed, bt)?;
        let inner = inner_forward(
            tape,
            store,
            z0,
            &h.inner,
            0,
            bt,
            &settings(cfg, true),
            opts.mode,
        )?;
        if opts.capture_attention {
            capture_inner(
                tape,
                &inner.attention,
                bt,
                n + 1,
                cfg.inner_heads,
                &mut maps.inner,
            );
        }

        let to_t = |v: &[f32]| {
            v.iter()
                .map(|&x| T::from_f64_lossy(x as f64))
                .collect::<Vec<T>>()
        };
        let rtg = tape.constant(Tensor::new(vec![bt, 1], to_t(&batch.returns_to_go))?)?;
        let rw = tape.param(store, h.rtg_w)?;
        let rb = tape.param(store, h.rtg_b)?;
        let rtg = tape.matmul(rtg, rw)?;
        let rtg = tape.add_tiled(rtg, rb)?;
        let act = tape.constant(Tensor::new(vec![bt, a], to_t(&batch.actions))?)?;
        let aw = tape.param(store, h.action_w)?;
        let ab = tape.param(store, h.action_b)?;
        let act = tape.matmul(act, aw)?;
        let act = tape.add_tiled(act, ab)?;

        let seq = dt_token_count(t, batch.last_action_present);
        let all = tape.concat_rows(&[rtg, inner.class_feature, act])?;
        let mut idx = Vec::with_capacity(b * seq);
        let mut token_valid = Vec::with_capacity(b * seq);
        let mut obs_rows = Vec::with_capacity(bt);
        for g in 0..b {
            for s in 0..t {
                let r = g * t + s;
                let valid = batch.valid[r];
                obs_rows.push(g * seq + 3 * s + 1);
                idx.extend([r, bt + r]);
                token_valid.extend([valid, valid]);
                if s + 1 < t || batch.last_action_present {
                    idx.push(2 * bt + r);
                    token_valid.push(valid);
                }
            }
        }
        let mut y = tape.gather_rows(all, &idx)?;
        if let Some(pos) = h.token_position {
            let pos = tape.param(store, pos)?;
            let rows: Vec<usize> = (0..seq).collect();
            let pos = tape.gather_rows(pos, &rows)?;
            y = tape.add_tiled(y, pos)?;
        }
        let all_valid = token_valid.iter().all(|&v| v);
        if !all_valid {
            y = tape.mask_rows(y, &token_valid)?;
        }
        let layout = SequenceLayout {
            groups: b,
            seq_len: seq,
            key_valid: (!all_valid).then_some(token_valid),
        };
        let outer_settings = settings(cfg, false);
        for (l, p) in h.outer.iter().enumerate() {
            let out = decoder_block(
                tape,
                store,
                y,
                p,
                &layout,
                &outer_settings,
                opts.mode,
                OUTER_SITE + l as u64,
            )?;
            y = out.out;
            if opts.capture_attention {
                maps.outer.extend(attention_records(
                    tape,
                    out.attention,
                    l,
                    b,
                    seq,
                    cfg.outer_heads,
                ));
            }
        }
        let at_obs = tape.gather_rows(y, &obs_rows)?;
        let action = h.head.action(tape, store, at_obs, cfg)?;
        Ok(DtOutput {
            action,
            tokens: y,
            attention: maps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_weights(
            &mut w,
            &self.params,
            &checkpoint_meta("sequence", &self.config),
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, cfg) = read_checkpoint(path, "sequence")?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_from(&store)?;
        Ok(model)
    }
}

/// One-hot rows for discrete actions.
pub fn one_hot(actions: &[usize], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; actions.len() * width];
    for (i, &a) in actions.iter().enumerate() {
        out[i * width + a] = 1.0;
    }
    out
}
