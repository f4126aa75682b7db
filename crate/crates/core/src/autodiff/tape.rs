use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Result, TitError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    /// Exact Gaussian-CDF form `x·Φ(x)`.
    Gelu,
    Relu,
    Tanh,
}

impl FromStr for ActivationKind {
    type Err = TitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(TitError::config(
                "activation",
                format!("unknown activation `{other}` (expected gelu, relu or tanh)"),
            )),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        })
    }
}

/// Layout and masking of a grouped multi-head attention call.
///
/// `q`, `k` and `v` hold `groups · seq_len` rows; each group of `seq_len`
/// consecutive rows attends only within itself. Columns are split evenly
/// among `heads`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub groups: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// Per-row validity (`groups · seq_len`). Invalid rows are never used as
    /// keys by valid queries; an invalid query row attends to itself only.
    pub key_valid: Option<Vec<bool>>,
    pub dropout: f64,
    pub training: bool,
    pub seed: u64,
}

impl AttentionSpec {
    pub fn new(groups: usize, seq_len: usize, heads: usize) -> Self {
        Self {
            groups,
            seq_len,
            heads,
            causal: false,
            key_valid: None,
            dropout: 0.0,
            training: false,
            seed: 0,
        }
    }

    fn allowed(&self, g: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_valid {
            None => true,
            Some(valid) => {
                let n = self.seq_len;
                valid[g * n + j] || (j == i && !valid[g * n + i])
            }
        }
    }
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    /// Softmax probabilities, laid out [group][head][query][key].
    probs: Vec<T>,
    /// Inverted-dropout multipliers over `probs`, when dropout was active.
    drop: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    Exp(Var),
    Square(Var),
    Clamp(Var, T, T),
    Activation(Var, ActivationKind),
    Dropout(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    PickPerRow(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention(Box<AttentionSaved<T>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Operations are appended in execution order, so the node list is already
/// topologically sorted; [`Tape::backward`] walks it once in reverse. Every
/// leaf is checked to be finite on entry and every op checks its output, so a
/// non-finite value surfaces as [`TitError::NonFinite`] at the op that
/// produced it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = store.get_mut(id).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d = *d + *s;
                }
            }
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TitError {
    TitError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() / T::from_f64_lossy((2.0 * PI).sqrt());
    cdf + x * pdf
}

fn dropout_multipliers<T: Scalar>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TitError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// Free-standing leaf that does receive a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// Brings a stored parameter onto the tape. Its gradient is routed back
    /// to `id` by [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.leaf(store.value(id).clone(), true, Some(id))
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TitError::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn two_d(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- linear algebra ------------------------------------------------

    /// `a` [m×k] times `b` [k×n]. `a` may carry leading axes, which are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a);
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(shape_err("matmul", self.shape(a), bs));
        }
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            shape = vec![1, k];
        }
        *shape.last_mut().unwrap() = n;
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if y < x { y } else { x },
            Op::Minimum(a, b),
        )
    }

    fn tiled_len(&self, name: &'static str, x: Var, t: Var) -> Result<usize> {
        let (tx, tt) = (self.value(x), self.value(t));
        let cols = tx.cols();
        if tt.len() % cols != 0 || tx.len() % tt.len() != 0 {
            return Err(shape_err(name, tx.shape(), tt.shape()));
        }
        Ok(tt.len())
    }

    /// `x` [R×d] plus `t` [n×d] repeated down the rows (`R` a multiple of
    /// `n`). With `n = 1` this is a bias add.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let period = self.tiled_len("add_tiled", x, t)?;
        let (tx, tt) = (self.value(x), self.value(t));
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tt.data()[i % period])
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_tiled", value, Op::AddTiled(x, t), &[x, t])
    }

    /// Elementwise product with a tiled `t`, broadcast like [`Tape::add_tiled`].
    pub fn mul_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let period = self.tiled_len("mul_tiled", x, t)?;
        let (tx, tt) = (self.value(x), self.value(t));
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tt.data()[i % period])
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("mul_tiled", value, Op::MulTiled(x, t), &[x, t])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let tx = self.value(x);
        if c.len() != tx.len() {
            return Err(shape_err("mul_const", tx.shape(), &[c.len()]));
        }
        let data = tx.data().iter().zip(&c).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("mul_const", value, Op::MulConst(x, c), &[x])
    }

    /// Zeroes whole rows of `x` where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.two_d(x);
        if keep.len() != rows {
            return Err(shape_err("mask_rows", self.shape(x), &[keep.len()]));
        }
        let c = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { T::one() } else { T::zero() }, cols))
            .collect();
        self.mul_const(x, c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push("exp", value, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", value, Op::Square(x), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push("clamp", value, Op::Clamp(x, lo, hi), &[x])
    }

    // ---- neural network primitives ------------------------------------

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let value = match kind {
            ActivationKind::Gelu => self.value(x).map(gelu),
            ActivationKind::Relu => self.value(x).map(|v| v.max(T::zero())),
            ActivationKind::Tanh => self.value(x).map(|v| v.tanh()),
        };
        self.push("activation", value, Op::Activation(x, kind), &[x])
    }

    /// Inverted dropout. Outside training, or at rate zero, returns `x`
    /// itself.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TitError::config(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_multipliers::<T>(self.value(x).len(), rate, seed);
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("dropout", value, Op::Dropout(x, mask), &[x])
    }

    /// Standardizes each row of `x` over its last axis, then applies
    /// `gain` and `bias` (both of length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.two_d(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(TitError::config(
                "eps",
                "layer norm epsilon must be positive",
            ));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let (tx, g, b) = (
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax over the last axis. Masked entries (`false`) get
    /// exactly zero probability; a row with nothing permitted is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = self.two_d(x);
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(shape_err("masked_softmax", self.shape(x), &[m.len()]));
            }
        }
        let tx = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let ok = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let row = tx.row(r);
            let max = (0..cols)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(TitError::EmptyContext {
                    op: "masked_softmax",
                })?;
            let mut total = T::zero();
            for j in (0..cols).filter(|&j| ok(j)) {
                let e = (row[j] - max).exp();
                out[r * cols + j] = e;
                total = total + e;
            }
            for j in (0..cols).filter(|&j| ok(j)) {
                out[r * cols + j] = out[r * cols + j] / total;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("masked_softmax", value, Op::MaskedSoftmax(x), &[x])
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.two_d(x);
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = tx.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    // ---- reductions and indexing -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums the last axis, keeping it as size 1.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = self.two_d(x);
        let t = self.value(x);
        let data = (0..rows).map(|r| t.row(r).iter().copied().sum()).collect();
        self.push(
            "sum_cols",
            Tensor::from_parts(vec![rows, 1], data),
            Op::SumCols(x),
            &[x],
        )
    }

    /// Picks column `idx[r]` from each row `r`, giving [rows×1].
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.two_d(x);
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(shape_err("pick_per_row", self.shape(x), &[idx.len()]));
        }
        let t = self.value(x);
        let data = idx.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect();
        let value = Tensor::from_parts(vec![rows, 1], data);
        self.push("pick_per_row", value, Op::PickPerRow(x, idx.to_vec()), &[x])
    }

    /// New [len(idx)×d] tensor made of the listed rows (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.two_d(x);
        if idx.iter().any(|&i| i >= rows) || idx.is_empty() {
            return Err(shape_err("gather_rows", self.shape(x), &[idx.len()]));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), cols], data);
        self.push("gather_rows", value, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.two_d(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.two_d(p);
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, cols], data);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.two_d(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.two_d(p);
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    // ---- attention -----------------------------------------------------

    /// Grouped multi-head scaled dot-product attention:
    /// `softmax(Q_h K_hᵀ / sqrt(d_h) + mask) V_h` per group and head, heads
    /// concatenated back along the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (rows, d) = self.two_d(q);
        let n = spec.seq_len;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if spec.heads == 0 || d % spec.heads != 0 || rows != spec.groups * n {
            return Err(shape_err(
                "attention",
                self.shape(q),
                &[spec.groups, n, spec.heads],
            ));
        }
        if let Some(kv) = &spec.key_valid {
            if kv.len() != rows {
                return Err(shape_err("attention", self.shape(q), &[kv.len()]));
            }
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(TitError::config(
                "dropout",
                "attention dropout outside [0, 1)",
            ));
        }
        let h = spec.heads;
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); spec.groups * h * n * n];
        let mut scores = vec![T::zero(); n];
        for g in 0..spec.groups {
            for hh in 0..h {
                for i in 0..n {
                    let qi = &qd[(g * n + i) * d + hh * dh..][..dh];
                    let mut max: Option<T> = None;
                    for j in 0..n {
                        if spec.allowed(g, i, j) {
                            let kj = &kd[(g * n + j) * d + hh * dh..][..dh];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = Some(max.map_or(s, |m: T| m.max(s)));
                        }
                    }
                    let max = max.ok_or(TitError::EmptyContext { op: "attention" })?;
                    let base = ((g * h + hh) * n + i) * n;
                    let mut total = T::zero();
                    for j in 0..n {
                        if spec.allowed(g, i, j) {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            total = total + e;
                        }
                    }
                    for p in &mut probs[base..base + n] {
                        *p = *p / total;
                    }
                }
            }
        }
        let drop = (spec.training && spec.dropout > 0.0)
            .then(|| dropout_multipliers::<T>(probs.len(), spec.dropout, spec.seed));
        let mut out = vec![T::zero(); rows * d];
        for g in 0..spec.groups {
            for hh in 0..h {
                for i in 0..n {
                    let base = ((g * h + hh) * n + i) * n;
                    let oi = &mut out[(g * n + i) * d + hh * dh..][..dh];
                    for j in 0..n {
                        if !spec.allowed(g, i, j) {
                            continue;
                        }
                        let p = match &drop {
                            Some(m) => probs[base + j] * m[base + j],
                            None => probs[base + j],
                        };
                        let vj = &vd[(g * n + j) * d + hh * dh..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(self.shape(q).to_vec(), out);
        let saved = AttentionSaved {
            q,
            k,
            v,
            spec,
            probs,
            drop,
        };
        self.push(
            "attention",
            value,
            Op::Attention(Box::new(saved)),
            &[q, k, v],
        )
    }

    /// Pre-dropout attention probabilities of an [`Tape::attention`] output,
    /// laid out [group][head][query][key].
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention(saved) => Some(&saved.probs),
            _ => None,
        }
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TitError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.two_d(*a);
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| T::gemm(m, n, k, g, false, bd, true, s, true));
                acc(*b, &|s| T::gemm(k, m, n, ad, true, g, false, s, true));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    (0..s.len()).for_each(|i| s[i] = s[i] + g[i] * bd[i])
                });
                acc(*b, &|s| {
                    (0..s.len()).for_each(|i| s[i] = s[i] + g[i] * ad[i])
                });
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // Ties route to the first operand, matching the forward pick.
                acc(*a, &|s| {
                    (0..s.len())
                        .filter(|&i| ad[i] <= bd[i])
                        .for_each(|i| s[i] = s[i] + g[i])
                });
                acc(*b, &|s| {
                    (0..s.len())
                        .filter(|&i| bd[i] < ad[i])
                        .for_each(|i| s[i] = s[i] + g[i])
                });
            }
            Op::AddTiled(x, t) => {
                acc(*x, &|s| add_into(s, g));
                let period = self.value(*t).len();
                acc(*t, &|s| {
                    g.iter()
                        .enumerate()
                        .for_each(|(i, &v)| s[i % period] = s[i % period] + v)
                });
            }
            Op::MulTiled(x, t) => {
                let (xd, td) = (self.value(*x).data(), self.value(*t).data());
                let period = td.len();
                acc(*x, &|s| {
                    (0..s.len()).for_each(|i| s[i] = s[i] + g[i] * td[i % period])
                });
                acc(*t, &|s| {
                    g.iter()
                        .enumerate()
                        .for_each(|(i, &v)| s[i % period] = s[i % period] + v * xd[i])
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| {
                s.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c)
            }),
            Op::AddScalar(x) => acc(*x, &|s| add_into(s, g)),
            Op::MulConst(x, c) | Op::Dropout(x, c) => acc(*x, &|s| {
                (0..s.len()).for_each(|i| s[i] = s[i] + g[i] * c[i])
            }),
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &|s| {
                    (0..s.len()).for_each(|i| s[i] = s[i] + g[i] * y[i])
                })
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                let two = T::from_f64_lossy(2.0);
                acc(*x, &|s| {
                    (0..s.len()).for_each(|i| s[i] = s[i] + two * g[i] * xd[i])
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(*x).data();
                acc(*x, &|s| {
                    (0..s.len())
                        .filter(|&i| xd[i] >= *lo && xd[i] <= *hi)
                        .for_each(|i| s[i] = s[i] + g[i])
                })
            }
            Op::Activation(x, kind) => {
                let (xd, y) = (self.value(*x).data(), node.value.data());
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        let d = match kind {
                            ActivationKind::Gelu => gelu_grad(xd[i]),
                            ActivationKind::Relu => {
                                if xd[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            ActivationKind::Tanh => T::one() - y[i] * y[i],
                        };
                        s[i] = s[i] + g[i] * d;
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = self.two_d(*x);
                let gd = self.value(*gain).data();
                acc(*gain, &|s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] = s[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] = s[j] + g[r * d + j];
                        }
                    }
                });
                if wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    acc(*x, &|s| {
                        for r in 0..rows {
                            let (gr, hr) = (&g[r * d..][..d], &xhat[r * d..][..d]);
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dxh = gr[j] * gd[j];
                                m1 = m1 + dxh;
                                m2 = m2 + dxh * hr[j];
                            }
                            m1 = m1 / dn;
                            m2 = m2 / dn;
                            for j in 0..d {
                                let dxh = gr[j] * gd[j];
                                s[r * d + j] = s[r * d + j] + inv_std[r] * (dxh - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                acc(*x, &|s| {
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..][..cols];
                        let inner = dot(yr, gr);
                        for j in 0..cols {
                            s[r * cols + j] = s[r * cols + j] + yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                acc(*x, &|s| {
                    for r in 0..rows {
                        let gr = &g[r * cols..][..cols];
                        let total: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            let p = y.row(r)[j].exp();
                            s[r * cols + j] = s[r * cols + j] + gr[j] - p * total;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                acc(*x, &|s| s.iter_mut().for_each(|d| *d = *d + g[0] / n))
            }
            Op::SumCols(x) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| {
                    (0..s.len()).for_each(|i| s[i] = s[i] + g[i / cols])
                })
            }
            Op::PickPerRow(x, idx) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| {
                    idx.iter()
                        .enumerate()
                        .for_each(|(r, &c)| s[r * cols + c] = s[r * cols + c] + g[r])
                })
            }
            Op::GatherRows(x, idx) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(
                            &mut s[r * cols..(r + 1) * cols],
                            &g[k * cols..(k + 1) * cols],
                        );
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &|s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (rows, c) = self.two_d(p);
                    acc(p, &|s| {
                        for r in 0..rows {
                            add_into(&mut s[r * c..(r + 1) * c], &g[r * total + offset..][..c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
        }
    }

    fn attention_backward(&self, saved: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let spec = &saved.spec;
        let (rows, d) = self.two_d(saved.q);
        let (n, h) = (spec.seq_len, spec.heads);
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(saved.q).data(),
            self.value(saved.k).data(),
            self.value(saved.v).data(),
        );
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); n];
        for gi in 0..spec.groups {
            for hh in 0..h {
                for i in 0..n {
                    let base = ((gi * h + hh) * n + i) * n;
                    let row_i = (gi * n + i) * d + hh * dh;
                    let go = &g[row_i..][..dh];
                    let mut inner = T::zero();
                    for j in 0..n {
                        if !spec.allowed(gi, i, j) {
                            dp[j] = T::zero();
                            continue;
                        }
                        let row_j = (gi * n + j) * d + hh * dh;
                        let m = saved.drop.as_ref().map_or(T::one(), |m| m[base + j]);
                        let p = saved.probs[base + j];
                        // dV_j += P'_ij dO_i
                        let pd = p * m;
                        for (dvv, &o) in dv[row_j..][..dh].iter_mut().zip(go) {
                            *dvv = *dvv + pd * o;
                        }
                        dp[j] = dot(go, &vd[row_j..][..dh]) * m;
                        inner = inner + p * dp[j];
                    }
                    for (j, &dpj) in dp.iter().enumerate().take(n) {
                        if !spec.allowed(gi, i, j) {
                            continue;
                        }
                        let row_j = (gi * n + j) * d + hh * dh;
                        let ds = saved.probs[base + j] * (dpj - inner) * scale;
                        for c in 0..dh {
                            dq[row_i + c] = dq[row_i + c] + ds * kd[row_j + c];
                            dk[row_j + c] = dk[row_j + c] + ds * qd[row_i + c];
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(saved.q, dq), (saved.k, dk), (saved.v, dv)] {
            if self.nodes[var.0].needs_grad {
                match &mut grads[var.0] {
                    Some(s) => add_into(s, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
        let z = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(z).data(), &[0.; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_constant_and_pair() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::full(&[4], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[4])).unwrap();
        let x = tape.constant(t(&[1, 4], &[5., 5., 5., 5.])).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.; 4]);

        let gain = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(t(&[1, 2], &[1., -1.])).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_moments_on_random_row() {
        // Moments recomputed directly from the output.
        let xs = [0.3, -1.7, 2.2, 0.9, -0.4, 1.1, 3.5, -2.6];
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::full(&[8], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[8])).unwrap();
        let x = tape.constant(t(&[1, 8], &xs)).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-8).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0., 0., 0.])).unwrap();
        let y = tape.masked_softmax(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[1, 3], &[9., 9., 9.])).unwrap();
        let y = tape
            .masked_softmax(x, Some(vec![true, false, false]))
            .unwrap();
        assert_eq!(tape.value(y).data(), &[1., 0., 0.]);

        let x = tape.constant(t(&[1, 3], &[1., 2., 3.])).unwrap();
        let err = tape.masked_softmax(x, Some(vec![false; 3])).unwrap_err();
        assert!(matches!(err, TitError::EmptyContext { .. }));
    }

    #[test]
    fn softmax_large_logits_match_exact_value() {
        // softmax([1000, 0]) = [1/(1+e^-1000), e^-1000/(1+e^-1000)]; the
        // second entry underflows to exactly 0 in f32 and f64 alike.
        let mut tape = Tape::<f32>::new();
        let x = tape
            .constant(Tensor::from_f64(&[1, 2], &[1000., 0.]).unwrap())
            .unwrap();
        let y = tape.masked_softmax(x, None).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1].abs() < 1e-30);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., -3., 3.])).unwrap();
        let g = tape.activation(x, ActivationKind::Gelu).unwrap();
        assert_eq!(tape.value(g).data()[0], 0.0);
        let r = tape.activation(x, ActivationKind::Relu).unwrap();
        assert_eq!(&tape.value(r).data()[1..], &[0., 3.]);

        // 10·Φ(10) with 1 − Φ(10) ≈ 7.6e-24.
        let x = tape.constant(t(&[1], &[10.])).unwrap();
        let g = tape.activation(x, ActivationKind::Gelu).unwrap();
        assert!((tape.value(g).data()[0] - 10.0).abs() < 1e-4);
        assert!("swish".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn dropout_identity_and_rate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[10_000], 1.0)).unwrap();
        assert_eq!(tape.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.1, false, 1).unwrap(), x);
        let y = tape.dropout(x, 0.5, true, 7).unwrap();
        let mean = tape.value(y).data().iter().sum::<f32>() / 10_000.0;
        assert!((0.95..=1.05).contains(&mean), "mean {mean}");
        let y2 = tape.dropout(x, 0.5, true, 7).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(y2).data());
        assert!(tape.dropout(x, 1.0, true, 7).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(t(&[3], &[1., 2., 3.])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn constant_loss_leaves_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1., 2.])).unwrap();
        let c = tape.constant(t(&[2], &[3., 4.])).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1., 2.])).unwrap();
        assert!(matches!(tape.backward(x), Err(TitError::NonScalarLoss(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(Tensor::full(&[2], 100.0)).unwrap();
        assert!(matches!(
            tape.exp(x),
            Err(TitError::NonFinite { op: "exp" })
        ));
        assert!(tape.constant(Tensor::full(&[1], f32::NAN)).is_err());
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(t(&[1], &[3.])).unwrap();
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[3.0]);
    }
}
