//! Pre-norm Transformer blocks.
//!
//! Both block types compute
//!
//! ```text
//! x̃ = x + MSA(LN(x))
//! y = x̃ + FFN(LN(x̃))
//! ```
//!
//! The encoder block attends freely within each group of rows; the decoder
//! block applies a causal mask. Rows are laid out group-major, so a batch of
//! independent sequences is one tensor of `groups · seq_len` rows.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{
    ActivationKind, AttentionSpec, ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};
use crate::error::{Result, TitError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform `±1/sqrt(fan_in)` initialization for a [fan_in × fan_out] matrix.
pub fn init_linear<T: Scalar, R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Tensor<T> {
    let bound = gain / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

/// Normal(0, std²) initialization, used for tokens and position tables.
pub fn init_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Train/eval switch plus the seed all dropout masks in one pass derive from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        training: false,
        seed: 0,
    };

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
        }
    }

    /// Independent sub-seed for the dropout site identified by `tag`.
    pub fn site_seed(&self, tag: u64) -> u64 {
        // splitmix64 finalizer
        let mut z = self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Dropout rates and activation shared by every block of one stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSettings {
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub activation: ActivationKind,
}

/// Parameter handles of one Transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub q_proj: ParamId,
    pub k_proj: ParamId,
    pub v_proj: ParamId,
    pub out_proj: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl BlockParams {
    /// Registers a freshly initialized block under `prefix`.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TitError::config(
                "heads",
                format!("{heads} heads do not divide embedding dimension {dim}"),
            ));
        }
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            ln1_gain: add("ln1_gain", Tensor::full(&[dim], T::one()))?,
            ln1_bias: add("ln1_bias", Tensor::zeros(&[dim]))?,
            q_proj: add("q_proj", init_linear(rng, dim, dim, 1.0))?,
            k_proj: add("k_proj", init_linear(rng, dim, dim, 1.0))?,
            v_proj: add("v_proj", init_linear(rng, dim, dim, 1.0))?,
            out_proj: add("out_proj", init_linear(rng, dim, dim, 1.0))?,
            ln2_gain: add("ln2_gain", Tensor::full(&[dim], T::one()))?,
            ln2_bias: add("ln2_bias", Tensor::zeros(&[dim]))?,
            ffn_w1: add("ffn_w1", init_linear(rng, dim, ffn_dim, 1.0))?,
            ffn_b1: add("ffn_b1", Tensor::zeros(&[ffn_dim]))?,
            ffn_w2: add("ffn_w2", init_linear(rng, ffn_dim, dim, 1.0))?,
            ffn_b2: add("ffn_b2", Tensor::zeros(&[dim]))?,
            dim,
            heads,
        })
    }

    pub fn matrices(&self) -> [ParamId; 6] {
        [
            self.q_proj,
            self.k_proj,
            self.v_proj,
            self.out_proj,
            self.ffn_w1,
            self.ffn_w2,
        ]
    }
}

/// Attention weights of one head of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block_index: usize,
    pub head_index: usize,
    /// Which sequence of the batch (row group) the matrix belongs to.
    pub group: usize,
    /// [n_queries × n_keys], rows sum to one.
    pub weights: Vec<Vec<f64>>,
}

/// Where a block's rows come from and how they may attend.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub groups: usize,
    pub seq_len: usize,
    pub key_valid: Option<Vec<bool>>,
}

impl SequenceLayout {
    pub fn dense(groups: usize, seq_len: usize) -> Self {
        Self {
            groups,
            seq_len,
            key_valid: None,
        }
    }
}

/// Output of one block: the new rows plus the attention node, whose weights
/// can be read back with [`attention_records`].
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// `n × n` mask with entry `(i, j)` permitted iff `j <= i`.
pub fn make_causal_mask(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
}

/// Multi-head self-attention over `x` [groups·seq_len × dim]: per head
/// `softmax(Q_h K_hᵀ / sqrt(dim/heads)) V_h`, heads concatenated and mapped
/// through the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &BlockParams,
    layout: &SequenceLayout,
    causal: bool,
    dropout: f64,
    mode: Mode,
    site: u64,
) -> Result<BlockOutput> {
    if tape.value(x).cols() != p.dim {
        return Err(TitError::Shape {
            op: "multi_head_self_attention",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![p.dim],
        });
    }
    let wq = tape.param(store, p.q_proj)?;
    let wk = tape.param(store, p.k_proj)?;
    let wv = tape.param(store, p.v_proj)?;
    let wo = tape.param(store, p.out_proj)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let spec = AttentionSpec {
        causal,
        key_valid: layout.key_valid.clone(),
        dropout,
        training: mode.training,
        seed: mode.site_seed(site),
        ..AttentionSpec::new(layout.groups, layout.seq_len, p.heads)
    };
    let attention = tape.attention(q, k, v, spec)?;
    let out = tape.matmul(attention, wo)?;
    Ok(BlockOutput { out, attention })
}

#[allow(clippy::too_many_arguments)]
fn block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &BlockParams,
    layout: &SequenceLayout,
    causal: bool,
    settings: &BlockSettings,
    mode: Mode,
    site: u64,
) -> Result<BlockOutput> {
    let g1 = tape.param(store, p.ln1_gain)?;
    let b1 = tape.param(store, p.ln1_bias)?;
    let normed = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
    let msa = multi_head_self_attention(
        tape,
        store,
        normed,
        p,
        layout,
        causal,
        settings.attn_dropout,
        mode,
        site.wrapping_mul(4),
    )?;
    let mid = tape.add(x, msa.out)?;

    let g2 = tape.param(store, p.ln2_gain)?;
    let b2 = tape.param(store, p.ln2_bias)?;
    let normed = tape.layer_norm(mid, g2, b2, LAYER_NORM_EPS)?;
    let w1 = tape.param(store, p.ffn_w1)?;
    let fb1 = tape.param(store, p.ffn_b1)?;
    let w2 = tape.param(store, p.ffn_w2)?;
    let fb2 = tape.param(store, p.ffn_b2)?;
    let h = tape.matmul(normed, w1)?;
    let h = tape.add_tiled(h, fb1)?;
    let h = tape.activation(h, settings.activation)?;
    let h = tape.dropout(
        h,
        settings.ffn_dropout,
        mode.training,
        mode.site_seed(site.wrapping_mul(4) + 1),
    )?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_tiled(h, fb2)?;
    let out = tape.add(mid, h)?;
    Ok(BlockOutput {
        out,
        attention: msa.attention,
    })
}

/// Inner (unmasked) block: every row of a group attends to every other.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    z: Var,
    p: &BlockParams,
    layout: &SequenceLayout,
    settings: &BlockSettings,
    mode: Mode,
    site: u64,
) -> Result<BlockOutput> {
    block(tape, store, z, p, layout, false, settings, mode, site)
}

/// Outer (causal) block: row `t` of a group sees rows `0..=t` only.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    y: Var,
    p: &BlockParams,
    layout: &SequenceLayout,
    settings: &BlockSettings,
    mode: Mode,
    site: u64,
) -> Result<BlockOutput> {
    block(tape, store, y, p, layout, true, settings, mode, site)
}

/// Splits the weights stored on an attention node into per-group, per-head
/// matrices.
pub fn attention_records<T: Scalar>(
    tape: &Tape<T>,
    attention: Var,
    block_index: usize,
    groups: usize,
    seq_len: usize,
    heads: usize,
) -> Vec<AttentionRecord> {
    let Some(probs) = tape.attention_weights(attention) else {
        return Vec::new();
    };
    let n = seq_len;
    let mut out = Vec::with_capacity(groups * heads);
    for g in 0..groups {
        for h in 0..heads {
            let base = (g * heads + h) * n * n;
            let weights = (0..n)
                .map(|i| {
                    probs[base + i * n..base + (i + 1) * n]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect()
                })
                .collect();
            out.push(AttentionRecord {
                block_index,
                head_index: h,
                group: g,
                weights,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SETTINGS: BlockSettings = BlockSettings {
        attn_dropout: 0.0,
        ffn_dropout: 0.0,
        activation: ActivationKind::Gelu,
    };

    fn random_block(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, BlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = BlockParams::register(&mut store, &mut rng, "b", dim, 4 * dim, heads).unwrap();
        // Non-trivial layer norm affine parameters.
        for id in [
            p.ln1_gain, p.ln1_bias, p.ln2_gain, p.ln2_bias, p.ffn_b1, p.ffn_b2,
        ] {
            let len = store.value(id).len();
            store.get_mut(id).value = init_normal(&mut rng, &[len], 0.5).map(|v| {
                v + if id == p.ln1_gain || id == p.ln2_gain {
                    1.0
                } else {
                    0.0
                }
            });
        }
        (store, p)
    }

    fn zero_weights(store: &mut ParamStore<f64>, p: &BlockParams) {
        for id in p
            .matrices()
            .into_iter()
            .chain([p.ffn_b1, p.ffn_b2, p.ln1_bias, p.ln2_bias])
        {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }

    fn input(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_normal(&mut rng, &[rows, dim], 1.0)
    }

    #[test]
    fn causal_mask_counts() {
        assert_eq!(make_causal_mask(1), vec![vec![true]]);
        assert_eq!(
            make_causal_mask(3),
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
        for (i, row) in make_causal_mask(16).iter().enumerate() {
            assert_eq!(row.iter().filter(|&&b| b).count(), i + 1);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, p) = random_block(4, 2, 1);
        let mut tape = Tape::new();
        let x = tape.constant(input(1, 4, 2)).unwrap();
        let out = encoder_block(
            &mut tape,
            &store,
            x,
            &p,
            &SequenceLayout::dense(1, 1),
            &SETTINGS,
            Mode::EVAL,
            0,
        )
        .unwrap();
        for rec in attention_records(&tape, out.attention, 0, 1, 1, 2) {
            assert_eq!(rec.weights, vec![vec![1.0]]);
        }
    }

    #[test]
    fn zero_out_projection_silences_attention() {
        let (mut store, p) = random_block(4, 1, 3);
        let shape = store.value(p.out_proj).shape().to_vec();
        store.get_mut(p.out_proj).value = Tensor::zeros(&shape);
        let mut tape = Tape::new();
        let x = tape.constant(input(3, 4, 4)).unwrap();
        let out = multi_head_self_attention(
            &mut tape,
            &store,
            x,
            &p,
            &SequenceLayout::dense(1, 3),
            false,
            0.0,
            Mode::EVAL,
            0,
        )
        .unwrap();
        assert!(tape.value(out.out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msa_matches_straight_line_formula() {
        // One head, D = 2, n = 4; recompute softmax(QKᵀ/√2)V·Wo by hand.
        let (store, p) = random_block(2, 1, 5);
        let x = input(4, 2, 6);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let out = multi_head_self_attention(
            &mut tape,
            &store,
            xv,
            &p,
            &SequenceLayout::dense(1, 4),
            false,
            0.0,
            Mode::EVAL,
            0,
        )
        .unwrap();
        let got = tape.value(out.out).data().to_vec();

        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                }
            }
            c
        };
        let w = |id| store.value(id).data().to_vec();
        let (q, k, v) = (
            mm(x.data(), &w(p.q_proj), 4, 2, 2),
            mm(x.data(), &w(p.k_proj), 4, 2, 2),
            mm(x.data(), &w(p.v_proj), 4, 2, 2),
        );
        let mut att = vec![0.0; 8];
        for i in 0..4 {
            let s: Vec<f64> = (0..4)
                .map(|j| (q[i * 2] * k[j * 2] + q[i * 2 + 1] * k[j * 2 + 1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let pij = s[j].exp() / z;
                att[i * 2] += pij * v[j * 2];
                att[i * 2 + 1] += pij * v[j * 2 + 1];
            }
        }
        let want = mm(&att, &w(p.out_proj), 4, 2, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_weight_blocks_are_identity() {
        let (mut store, p) = random_block(8, 2, 7);
        zero_weights(&mut store, &p);
        let x = input(5, 8, 8);
        for causal in [false, true] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let layout = SequenceLayout::dense(1, 5);
            let out = if causal {
                decoder_block(&mut tape, &store, xv, &p, &layout, &SETTINGS, Mode::EVAL, 0)
            } else {
                encoder_block(&mut tape, &store, xv, &p, &layout, &SETTINGS, Mode::EVAL, 0)
            }
            .unwrap();
            assert_eq!(tape.value(out.out).data(), x.data());
        }
    }

    #[test]
    fn encoder_shape_contract() {
        let (store, p) = random_block(8, 2, 9);
        for n in [1, 4, 49] {
            let mut tape = Tape::new();
            let x = tape.constant(input(n + 1, 8, n as u64)).unwrap();
            let out = encoder_block(
                &mut tape,
                &store,
                x,
                &p,
                &SequenceLayout::dense(1, n + 1),
                &SETTINGS,
                Mode::EVAL,
                0,
            )
            .unwrap();
            assert_eq!(tape.shape(out.out), &[n + 1, 8]);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        // Swap patch rows 1..=4 (class row 0 fixed); output rows follow.
        let (store, p) = random_block(8, 2, 10);
        let x = input(5, 8, 11);
        let perm = [0usize, 3, 1, 4, 2];
        let mut permuted = Vec::new();
        for &r in &perm {
            permuted.extend_from_slice(x.row(r));
        }
        let run = |t: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(t).unwrap();
            let out = encoder_block(
                &mut tape,
                &store,
                xv,
                &p,
                &SequenceLayout::dense(1, 5),
                &SETTINGS,
                Mode::EVAL,
                0,
            )
            .unwrap();
            tape.value(out.out).clone()
        };
        let a = run(x.clone());
        let b = run(Tensor::new(vec![5, 8], permuted).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b.at(dst, c) - a.at(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_with_one_row_equals_encoder() {
        let (store, p) = random_block(8, 2, 12);
        let x = input(1, 8, 13);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let layout = SequenceLayout::dense(1, 1);
        let a =
            decoder_block(&mut tape, &store, xv, &p, &layout, &SETTINGS, Mode::EVAL, 0).unwrap();
        let b =
            encoder_block(&mut tape, &store, xv, &p, &layout, &SETTINGS, Mode::EVAL, 0).unwrap();
        assert_eq!(tape.value(a.out).data(), tape.value(b.out).data());
    }

    #[test]
    fn decoder_rows_ignore_the_future() {
        let (store, p) = random_block(8, 2, 14);
        let x = input(4, 8, 15);
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(t.clone()).unwrap();
            let out = decoder_block(
                &mut tape,
                &store,
                xv,
                &p,
                &SequenceLayout::dense(1, 4),
                &SETTINGS,
                Mode::EVAL,
                0,
            )
            .unwrap();
            tape.value(out.out).clone()
        };
        let base = run(&x);
        for t in 0..3 {
            let mut y = x.clone();
            for c in 0..8 {
                y.data_mut()[(t + 1) * 8 + c] += 3.0;
            }
            let out = run(&y);
            assert_eq!(&out.data()[..(t + 1) * 8], &base.data()[..(t + 1) * 8]);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, p) = random_block(8, 4, 16);
        let mut tape = Tape::new();
        let x = tape.constant(input(6, 8, 17)).unwrap();
        let out = decoder_block(
            &mut tape,
            &store,
            x,
            &p,
            &SequenceLayout::dense(2, 3),
            &SETTINGS,
            Mode::EVAL,
            0,
        )
        .unwrap();
        let records = attention_records(&tape, out.attention, 0, 2, 3, 4);
        assert_eq!(records.len(), 8);
        for rec in records {
            for (i, row) in rec.weights.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
                assert!(row[i + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(BlockParams::register(&mut store, &mut rng, "b", 6, 24, 4).is_err());
    }
}
