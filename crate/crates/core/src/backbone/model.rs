use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ActionSpec, TitConfig, Variant};
use super::input::WindowBatch;
use super::patch::{patchify_into, stack_frames};
use crate::autodiff::weights::{read_weights, write_weights};
use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::blocks::{
    attention_records, decoder_block, encoder_block, init_linear, init_normal, AttentionRecord,
    BlockParams, BlockSettings, Mode, SequenceLayout,
};
use crate::error::{Result, TitError};

pub(crate) const TOKEN_INIT_STD: f64 = 0.02;
pub(crate) const HEAD_OUTPUT_GAIN: f64 = 0.01;
const INNER_SITE: u64 = 1;
const OUTER_SITE: u64 = 1001;

/// Std of the patch position table: the bound of the patch embedding, so
/// positions stay distinguishable after layer norm even for one-value
/// patches whose embeddings all point the same way.
fn position_std(patch_dim: usize) -> f64 {
    1.0 / (patch_dim as f64).sqrt()
}

/// Patch embedding, class token and patch position table.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub patch: ParamId,
    pub patch_bias: ParamId,
    pub class_token: ParamId,
    pub position: ParamId,
}

impl EmbedParams {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        patch_dim: usize,
        num_patches: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            patch: store.add("embed.patch", init_linear(rng, patch_dim, dim, 1.0))?,
            class_token: store.add(
                "embed.class_token",
                init_normal(rng, &[1, dim], TOKEN_INIT_STD),
            )?,
            position: store.add(
                "embed.position",
                init_normal(rng, &[num_patches + 1, dim], position_std(patch_dim)),
            )?,
            patch_bias: store.add("embed.patch_bias", init_bias(rng, patch_dim, dim))?,
        })
    }
}

/// Action head FFN plus the linear value head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub value: Option<(ParamId, ParamId)>,
    pub log_std: Option<ParamId>,
}

impl HeadParams {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        input: usize,
        hidden: usize,
        action: ActionSpec,
        with_value: bool,
    ) -> Result<Self> {
        let out = action.width();
        let hidden_w = store.add("head.hidden_w", init_linear(rng, input, hidden, 1.0))?;
        let hidden_b = store.add("head.hidden_b", Tensor::zeros(&[1, hidden]))?;
        let out_w = store.add(
            "head.out_w",
            init_linear(rng, hidden, out, HEAD_OUTPUT_GAIN),
        )?;
        let out_b = store.add("head.out_b", Tensor::zeros(&[1, out]))?;
        let value = if with_value {
            Some((
                store.add("value.w", init_linear(rng, input, 1, 1.0))?,
                store.add("value.b", Tensor::zeros(&[1, 1]))?,
            ))
        } else {
            None
        };
        let log_std = match action {
            ActionSpec::Continuous(n) => Some(store.add("head.log_std", Tensor::zeros(&[1, n]))?),
            ActionSpec::Discrete(_) => None,
        };
        Ok(Self {
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            value,
            log_std,
        })
    }

    /// Action output `act(f·W1 + b1)·W2 + b2`.
    pub(crate) fn action<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        cfg: &TitConfig,
    ) -> Result<Var> {
        let w1 = tape.param(store, self.hidden_w)?;
        let b1 = tape.param(store, self.hidden_b)?;
        let w2 = tape.param(store, self.out_w)?;
        let b2 = tape.param(store, self.out_b)?;
        let h = tape.matmul(features, w1)?;
        let h = tape.add_tiled(h, b1)?;
        let h = tape.activation(h, cfg.activation)?;
        let out = tape.matmul(h, w2)?;
        tape.add_tiled(out, b2)
    }
}

/// Uniform `±1/√fan_in` bias. With single-entry patches a zero bias would
/// leave `x·E` with no offset, and layer norm would reduce each token to the
/// sign of its entry.
pub(crate) fn init_bias<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, dim: usize) -> Tensor<T> {
    init_linear(rng, 1, dim, 1.0 / (fan_in as f64).sqrt())
}

/// `z0 = [class; patches·E + b] + pos` for each of `groups` observations.
///
/// `patches` holds `groups · N` patch rows, observation-major. The result
/// has `groups · (N+1)` rows with each observation's class token first.
pub fn embed_and_tokenize<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    patches: Var,
    params: &EmbedParams,
    groups: usize,
) -> Result<Var> {
    let rows = tape.value(patches).rows();
    let pos_rows = store.value(params.position).rows();
    if groups == 0 || rows != groups * (pos_rows - 1) {
        return Err(TitError::Shape {
            op: "embed_and_tokenize",
            lhs: tape.shape(patches).to_vec(),
            rhs: vec![groups, pos_rows - 1],
        });
    }
    let n = pos_rows - 1;
    let e = tape.param(store, params.patch)?;
    let embedded = tape.matmul(patches, e)?;
    let bias = tape.param(store, params.patch_bias)?;
    let embedded = tape.add_tiled(embedded, bias)?;
    let class = tape.param(store, params.class_token)?;
    let all = tape.concat_rows(&[embedded, class])?;
    let mut idx = Vec::with_capacity(groups * (n + 1));
    for g in 0..groups {
        idx.push(groups * n);
        idx.extend(g * n..(g + 1) * n);
    }
    let tokens = tape.gather_rows(all, &idx)?;
    let pos = tape.param(store, params.position)?;
    tape.add_tiled(tokens, pos)
}

/// Result of running inner blocks over a batch of token sequences.
#[derive(Clone, Debug)]
pub struct InnerOutput {
    pub z: Var,
    /// Row 0 of every sequence, [groups × D].
    pub class_feature: Var,
    pub attention: Vec<Var>,
}

/// Applies `blocks` in order as encoder blocks over `groups` sequences.
#[allow(clippy::too_many_arguments)]
pub fn inner_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    z0: Var,
    blocks: &[BlockParams],
    first_index: usize,
    groups: usize,
    settings: &BlockSettings,
    mode: Mode,
) -> Result<InnerOutput> {
    if blocks.is_empty() {
        return Err(TitError::config(
            "num_blocks",
            "inner_forward needs at least one block",
        ));
    }
    let seq_len = tape.value(z0).rows() / groups;
    let layout = SequenceLayout::dense(groups, seq_len);
    let mut z = z0;
    let mut attention = Vec::with_capacity(blocks.len());
    for (i, p) in blocks.iter().enumerate() {
        let site = INNER_SITE + (first_index + i) as u64;
        let out = encoder_block(tape, store, z, p, &layout, settings, mode, site)?;
        z = out.out;
        attention.push(out.attention);
    }
    let rows: Vec<usize> = (0..groups).map(|g| g * seq_len).collect();
    let class_feature = tape.gather_rows(z, &rows)?;
    Ok(InnerOutput {
        z,
        class_feature,
        attention,
    })
}

/// Stacks per-timestep features [B·K × D] (oldest first within each
/// window) into the outer input: optional temporal positions added, invalid
/// slots zeroed.
pub fn assemble_outer_input<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    class_features: Var,
    valid: &[bool],
    context: usize,
    temporal_position: Option<ParamId>,
) -> Result<Var> {
    let rows = tape.value(class_features).rows();
    if context == 0 || valid.len() != rows || !rows.is_multiple_of(context) {
        return Err(TitError::Shape {
            op: "assemble_outer_input",
            lhs: tape.shape(class_features).to_vec(),
            rhs: vec![valid.len(), context],
        });
    }
    if let Some(b) = (0..rows / context).find(|b| !valid[b * context + context - 1]) {
        return Err(TitError::InvalidTensor(format!(
            "window {b}: the current observation slot is invalid"
        )));
    }
    let mut y = class_features;
    if let Some(pos) = temporal_position {
        let pos = tape.param(store, pos)?;
        y = tape.add_tiled(y, pos)?;
    }
    if valid.iter().all(|&v| v) {
        Ok(y)
    } else {
        tape.mask_rows(y, valid)
    }
}

/// Switches for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub capture_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            mode: Mode::EVAL,
            capture_attention: false,
        }
    }
}

/// Attention weights captured during a forward.
///
/// Inner records use group `b·K + k` for frame `k` of window `b` (for
/// `wo_outer` the group is the window). Outer records use group `b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMaps {
    pub inner: Vec<AttentionRecord>,
    pub outer: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// [B × A]: logits for discrete actions, means for continuous ones.
    pub action: Var,
    /// [B × 1].
    pub value: Var,
    /// [B × F], what the heads read.
    pub features: Var,
    /// [1 × A] for continuous actions.
    pub log_std: Option<Var>,
    /// Full output of every outer block, [B·K × D] each.
    pub outer_outputs: Vec<Var>,
    pub attention: AttentionMaps,
}

/// Parameter handles, by role.
#[derive(Clone, Debug)]
struct Handles {
    embed: Option<EmbedParams>,
    obs_embed: Option<(ParamId, ParamId)>,
    inner: Vec<BlockParams>,
    outer: Vec<BlockParams>,
    temporal_position: Option<ParamId>,
    head: HeadParams,
}

/// A policy network over observation histories, in any of the five wirings.
#[derive(Clone, Debug)]
pub struct TitModel<T: Scalar> {
    config: TitConfig,
    params: ParamStore<T>,
    handles: Handles,
}

pub(crate) fn settings(cfg: &TitConfig, inner: bool) -> BlockSettings {
    if inner {
        BlockSettings {
            attn_dropout: cfg.inner_attn_dropout,
            ffn_dropout: cfg.inner_ffn_dropout,
            activation: cfg.activation,
        }
    } else {
        BlockSettings {
            attn_dropout: cfg.outer_attn_dropout,
            ffn_dropout: cfg.outer_ffn_dropout,
            activation: cfg.activation,
        }
    }
}

pub(crate) fn register_blocks<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &TitConfig,
    heads: usize,
) -> Result<Vec<BlockParams>> {
    (0..cfg.num_blocks)
        .map(|l| {
            BlockParams::register(
                store,
                rng,
                &format!("{prefix}.{l}"),
                cfg.embed_dim,
                cfg.ffn_dim(),
                heads,
            )
        })
        .collect()
}

pub(crate) fn image_scale(cfg: &TitConfig) -> f32 {
    if cfg.obs.is_image() {
        1.0 / 255.0
    } else {
        1.0
    }
}

pub(crate) fn capture_inner<T: Scalar>(
    tape: &Tape<T>,
    vars: &[Var],
    groups: usize,
    seq_len: usize,
    heads: usize,
    out: &mut Vec<AttentionRecord>,
) {
    for (l, &v) in vars.iter().enumerate() {
        out.extend(attention_records(tape, v, l, groups, seq_len, heads));
    }
}

impl<T: Scalar> TitModel<T> {
    /// Builds and initializes a model; equal seeds give equal parameters.
    pub fn new(config: TitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let d = cfg.embed_dim;
        let embed = if cfg.variant.has_inner() {
            Some(EmbedParams::register(
                &mut store,
                &mut rng,
                cfg.patch_dim(),
                cfg.num_patches(),
                d,
            )?)
        } else {
            None
        };
        let obs_embed = if cfg.variant == Variant::WoInner {
            Some((
                store.add(
                    "embed.observation",
                    init_linear(&mut rng, cfg.obs.len(), d, 1.0),
                )?,
                store.add(
                    "embed.observation_bias",
                    init_bias(&mut rng, cfg.obs.len(), d),
                )?,
            ))
        } else {
            None
        };
        let inner = if cfg.variant.has_inner() {
            register_blocks(&mut store, &mut rng, "inner", cfg, cfg.inner_heads)?
        } else {
            Vec::new()
        };
        let outer = if cfg.variant.has_outer() {
            register_blocks(&mut store, &mut rng, "outer", cfg, cfg.outer_heads)?
        } else {
            Vec::new()
        };
        let temporal_position = if cfg.variant.has_outer() && cfg.outer_position_encoding {
            Some(store.add(
                "outer.temporal_position",
                init_normal(&mut rng, &[cfg.context_len, d], TOKEN_INIT_STD),
            )?)
        } else {
            None
        };
        let head = HeadParams::register(
            &mut store,
            &mut rng,
            cfg.head_input_dim(),
            cfg.head_hidden,
            cfg.action,
            true,
        )?;
        Ok(Self {
            config,
            params: store,
            handles: Handles {
                embed,
                obs_embed,
                inner,
                outer,
                temporal_position,
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

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Elements in the inner Transformer blocks (embeddings excluded).
    pub fn inner_block_params(&self) -> usize {
        self.params.num_elements_with_prefix("inner.")
    }

    pub fn inner_blocks(&self) -> &[BlockParams] {
        &self.handles.inner
    }

    pub fn outer_blocks(&self) -> &[BlockParams] {
        &self.handles.outer
    }

    pub fn embed_params(&self) -> Option<&EmbedParams> {
        self.handles.embed.as_ref()
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.handles.head
    }

    pub fn temporal_position(&self) -> Option<ParamId> {
        self.handles.temporal_position
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &WindowBatch,
        opts: ForwardOptions,
    ) -> Result<PolicyOutput> {
        self.forward_with(&self.params, tape, batch, opts)
    }

    /// Forward pass reading parameter values from `store`, which must share
    /// this model's layout (e.g. a perturbed clone during gradient checks).
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        batch: &WindowBatch,
        opts: ForwardOptions,
    ) -> Result<PolicyOutput> {
        let cfg = &self.config;
        if batch.context() != cfg.context_len || batch.obs_len() != cfg.obs.len() {
            return Err(TitError::Shape {
                op: "forward",
                lhs: vec![batch.batch(), batch.context(), batch.obs_len()],
                rhs: vec![cfg.context_len, cfg.obs.len()],
            });
        }
        let (b, k) = (batch.batch(), batch.context());
        let last: Vec<usize> = (0..b).map(|i| i * k + k - 1).collect();
        let outer_layout = SequenceLayout {
            groups: b,
            seq_len: k,
            key_valid: (!batch.all_valid()).then(|| batch.valid().to_vec()),
        };
        let inner_settings = settings(cfg, true);
        let outer_settings = settings(cfg, false);
        let mut maps = AttentionMaps::default();
        let mut outer_outputs = Vec::new();
        let n1 = cfg.num_patches() + 1;

        let features = match cfg.variant {
            Variant::Vanilla | Variant::Enhanced | Variant::WoDense => {
                let z0 = self.tokens(tape, store, batch, false)?;
                let groups = b * k;
                if cfg.variant == Variant::Vanilla {
                    let inner = inner_forward(
                        tape,
                        store,
                        z0,
                        &self.handles.inner,
                        0,
                        groups,
                        &inner_settings,
                        opts.mode,
                    )?;
                    if opts.capture_attention {
                        capture_inner(
                            tape,
                            &inner.attention,
                            groups,
                            n1,
                            cfg.inner_heads,
                            &mut maps.inner,
                        );
                    }
                    let mut y = assemble_outer_input(
                        tape,
                        store,
                        inner.class_feature,
                        batch.valid(),
                        k,
                        self.handles.temporal_position,
                    )?;
                    for (l, p) in self.handles.outer.iter().enumerate() {
                        let out = decoder_block(
                            tape,
                            store,
                            y,
                            p,
                            &outer_layout,
                            &outer_settings,
                            opts.mode,
                            OUTER_SITE + l as u64,
                        )?;
                        y = out.out;
                        outer_outputs.push(y);
                        if opts.capture_attention {
                            maps.outer.extend(attention_records(
                                tape,
                                out.attention,
                                l,
                                b,
                                k,
                                cfg.outer_heads,
                            ));
                        }
                    }
                    tape.gather_rows(y, &last)?
                } else {
                    let mut z = z0;
                    let mut lasts = Vec::with_capacity(cfg.num_blocks);
                    for l in 0..cfg.num_blocks {
                        let inner = inner_forward(
                            tape,
                            store,
                            z,
                            &self.handles.inner[l..=l],
                            l,
                            groups,
                            &inner_settings,
                            opts.mode,
                        )?;
                        z = inner.z;
                        if opts.capture_attention {
                            maps.inner.extend(attention_records(
                                tape,
                                inner.attention[0],
                                l,
                                groups,
                                n1,
                                cfg.inner_heads,
                            ));
                        }
                        let y_in = assemble_outer_input(
                            tape,
                            store,
                            inner.class_feature,
                            batch.valid(),
                            k,
                            self.handles.temporal_position,
                        )?;
                        let out = decoder_block(
                            tape,
                            store,
                            y_in,
                            &self.handles.outer[l],
                            &outer_layout,
                            &outer_settings,
                            opts.mode,
                            OUTER_SITE + l as u64,
                        )?;
                        outer_outputs.push(out.out);
                        if opts.capture_attention {
                            maps.outer.extend(attention_records(
                                tape,
                                out.attention,
                                l,
                                b,
                                k,
                                cfg.outer_heads,
                            ));
                        }
                        lasts.push(tape.gather_rows(out.out, &last)?);
                    }
                    if cfg.variant == Variant::Enhanced {
                        tape.concat_cols(&lasts)?
                    } else {
                        *lasts.last().expect("at least one block")
                    }
                }
            }
            Variant::WoInner => {
                let scale = image_scale(cfg);
                let data = batch
                    .obs
                    .iter()
                    .map(|&v| T::from_f64_lossy((v * scale) as f64))
                    .collect();
                let x = tape.constant(Tensor::new(vec![b * k, cfg.obs.len()], data)?)?;
                let (e, eb) = self
                    .handles
                    .obs_embed
                    .expect("wo_inner has an observation embedding");
                let e = tape.param(store, e)?;
                let eb = tape.param(store, eb)?;
                let y0 = tape.matmul(x, e)?;
                let y0 = tape.add_tiled(y0, eb)?;
                let mut y = assemble_outer_input(
                    tape,
                    store,
                    y0,
                    batch.valid(),
                    k,
                    self.handles.temporal_position,
                )?;
                for (l, p) in self.handles.outer.iter().enumerate() {
                    let out = decoder_block(
                        tape,
                        store,
                        y,
                        p,
                        &outer_layout,
                        &outer_settings,
                        opts.mode,
                        OUTER_SITE + l as u64,
                    )?;
                    y = out.out;
                    outer_outputs.push(y);
                    if opts.capture_attention {
                        maps.outer.extend(attention_records(
                            tape,
                            out.attention,
                            l,
                            b,
                            k,
                            cfg.outer_heads,
                        ));
                    }
                }
                tape.gather_rows(y, &last)?
            }
            Variant::WoOuter => {
                let z0 = self.tokens(tape, store, batch, true)?;
                let inner = inner_forward(
                    tape,
                    store,
                    z0,
                    &self.handles.inner,
                    0,
                    b,
                    &inner_settings,
                    opts.mode,
                )?;
                if opts.capture_attention {
                    capture_inner(
                        tape,
                        &inner.attention,
                        b,
                        n1,
                        cfg.inner_heads,
                        &mut maps.inner,
                    );
                }
                inner.class_feature
            }
        };

        let head = &self.handles.head;
        let action = head.action(tape, store, features, cfg)?;
        let (vw, vb) = head.value.expect("policy models carry a value head");
        let vw = tape.param(store, vw)?;
        let vb = tape.param(store, vb)?;
        let value = tape.matmul(features, vw)?;
        let value = tape.add_tiled(value, vb)?;
        let log_std = head.log_std.map(|id| tape.param(store, id)).transpose()?;
        Ok(PolicyOutput {
            action,
            value,
            features,
            log_std,
            outer_outputs,
            attention: maps,
        })
    }

    /// Patchifies every frame (or every stacked window) and tokenizes it.
    fn tokens(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &WindowBatch,
        stacked: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, k) = (batch.batch(), batch.context());
        let scale = image_scale(cfg);
        let n = cfg.num_patches();
        let groups = if stacked { b } else { b * k };
        let mut data = Vec::with_capacity(groups * n * cfg.patch_dim());
        if stacked {
            for i in 0..b {
                let frames = &batch.obs[i * k * batch.obs_len()..(i + 1) * k * batch.obs_len()];
                let merged = stack_frames(frames, cfg.obs, k);
                patchify_into(&merged, cfg.inner_obs(), cfg.patch_size, scale, &mut data)?;
            }
        } else {
            for i in 0..b {
                for j in 0..k {
                    patchify_into(batch.frame(i, j), cfg.obs, cfg.patch_size, scale, &mut data)?;
                }
            }
        }
        let patches = tape.constant(Tensor::new(vec![groups * n, cfg.patch_dim()], data)?)?;
        let embed = self
            .handles
            .embed
            .as_ref()
            .expect("variant has an inner stack");
        embed_and_tokenize(tape, store, patches, embed, groups)
    }

    /// Checkpoint: a weight file whose metadata is the config record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_weights(
            &mut w,
            &self.params,
            &checkpoint_meta("policy", &self.config),
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, cfg) = read_checkpoint(path, "policy")?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_from(&store)?;
        Ok(model)
    }
}

pub(crate) fn checkpoint_meta(kind: &str, cfg: &TitConfig) -> String {
    format!("model = {kind}\n{}", cfg.to_record())
}

pub(crate) fn read_checkpoint<T: Scalar>(
    path: &Path,
    kind: &str,
) -> Result<(ParamStore<T>, TitConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let (store, meta) = read_weights::<T, _>(&mut r)?;
    let found = meta
        .lines()
        .find_map(|l| {
            l.split_once('=')
                .filter(|(k, _)| k.trim() == "model")
                .map(|(_, v)| v.trim())
        })
        .ok_or_else(|| TitError::Format("checkpoint metadata lacks a model kind".into()))?;
    if found != kind {
        return Err(TitError::Format(format!(
            "checkpoint holds a {found} model, expected {kind}"
        )));
    }
    Ok((store, TitConfig::from_record(&meta)?))
}
