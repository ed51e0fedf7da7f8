//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its value and the op that produced it. [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`] for every node that
//! depends on a trainable leaf.
//!
//! Parameter leaves borrow their values from a [`ParamStore`] so building a
//! graph never copies model weights.
//!
//! Besides the textbook elementwise and matrix ops, the tape has fused
//! kernels for layer normalization, rotary position encoding and
//! prefix-masked multi-head attention. Each fused op has a hand-written
//! backward that is checked against finite differences in the test suite.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, matrix_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed per-token rotation tables for [`Graph::rope`].
///
/// `cos` and `sin` are `[tokens, half]` where `half = head_dim / 2`; the
/// same angles are applied to every head.
#[derive(Clone, Debug)]
pub struct RotationTable {
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RotationTable {
    pub fn tokens(&self) -> usize {
        self.cos.len() / self.half.max(1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    GatherElems(Var, Arc<Vec<(usize, usize)>>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax(Var, usize),
    RowNormalize(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Cosine(Var, Var),
    Rope(Var, Arc<RotationTable>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        limits: Arc<Vec<usize>>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    macs: u64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            macs: 0,
        }
    }

    /// A graph whose parameter leaves read from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by matrix products and attention so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.len() == value.shape().iter().product::<usize>());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that gradients are tracked for (used for gradient checks
    /// and for inputs whose sensitivity is wanted).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("graph was built without a parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.tensor(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a length-`d` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, d) = ta.as_matrix_dims();
        if tb.len() != d {
            return Err(Error::Dimension(format!(
                "add_bias: bias of {} values for rows of width {d}",
                tb.len()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    /// Scales row `i` of `a: [m, d]` by `w[i]` where `w: [m, 1]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        let (m, d) = matrix_dims(ta)?;
        if tw.len() != m {
            return Err(Error::Dimension(format!(
                "mul_col: {} weights for {m} rows",
                tw.len()
            )));
        }
        let mut data = ta.data().to_vec();
        for (row, s) in data.chunks_mut(d).zip(tw.data()) {
            for x in row {
                *x *= s;
            }
        }
        let t = Tensor::from_parts(vec![m, d], data);
        let rg = self.rg(&[a, w]);
        Ok(self.push(t, Op::MulCol(a, w), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta)?;
        let (k2, n) = matrix_dims(tb)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), (k, 1), tb.data(), (n, 1), &mut out);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = matrix_dims(self.value(parts[0]))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p))?;
            if c != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows: column counts {cols} and {c} differ"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(a))?;
        if start >= end || end > r {
            return Err(Error::Range(format!(
                "slice_rows {start}..{end} of a {r}-row matrix"
            )));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![end - start, c], data),
            Op::SliceRows(a, start),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix_dims(ta)?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(Error::Range(format!("gather_rows index {i} of {r} rows")));
            }
            data.extend_from_slice(ta.row(i));
        }
        let rg = self.rg(&[a]);
        let n = idx.len();
        Ok(self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::GatherRows(a, idx),
            rg,
        ))
    }

    /// Sums row `i` of `a` into row `idx[i]` of a zero `[rows, d]` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix_dims(ta)?;
        if idx.len() != r {
            return Err(Error::Dimension(format!(
                "scatter_rows: {} indices for {r} rows",
                idx.len()
            )));
        }
        let mut data = vec![0.0; rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(Error::Range(format!("scatter_rows index {dst} of {rows}")));
            }
            for (o, x) in data[dst * c..(dst + 1) * c].iter_mut().zip(ta.row(src)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ScatterRows(a, idx),
            rg,
        ))
    }

    /// Picks `a[r, c]` for each `(r, c)` into a `[m, 1]` column.
    pub fn gather_elems(&mut self, a: Var, at: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix_dims(ta)?;
        if at.is_empty() {
            return Err(Error::Contract("gather_elems with no indices".into()));
        }
        let mut data = Vec::with_capacity(at.len());
        for &(i, j) in at.iter() {
            if i >= r || j >= c {
                return Err(Error::Range(format!("gather_elems ({i},{j}) of [{r},{c}]")));
            }
            data.push(ta.data()[i * c + j]);
        }
        let rg = self.rg(&[a]);
        let m = at.len();
        Ok(self.push(
            Tensor::from_parts(vec![m, 1], data),
            Op::GatherElems(a, at),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means of a `[n, d]` matrix as a `[1, d]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix_dims(ta)?;
        let mut out = vec![0.0; c];
        for row in ta.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} for a {}-d tensor",
                shape.len()
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), rg))
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, c) = matrix_dims(ta)?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::DegenerateInput("row_normalize of a zero-sum row".into()));
            }
            for x in row {
                *x /= s;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(ta.shape().to_vec(), data), Op::RowNormalize(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu(a), rg)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.as_matrix_dims();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias must have {c} values"
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                normalized[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Cosine similarity of two equally sized tensors viewed as vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension(format!(
                "cosine of vectors of length {} and {}",
                ta.len(),
                tb.len()
            )));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
        }
        let c = (ta.dot(tb) / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// Rotates consecutive pairs in each head of `x: [tokens, heads * 2 * half]`
    /// by the per-token angles in `table`.
    pub fn rope(&mut self, x: Var, table: Arc<RotationTable>) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = matrix_dims(tx)?;
        let half = table.half;
        if half == 0 || d % (2 * half) != 0 || table.tokens() != n {
            return Err(Error::Dimension(format!(
                "rope: table for {} tokens of half-dim {half} applied to [{n},{d}]",
                table.tokens()
            )));
        }
        let out = apply_rotation(tx.data(), n, d, &table, false);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::Rope(x, table), rg))
    }

    /// Multi-head scaled dot-product attention with a prefix mask: query
    /// row `i` attends to key rows `0..limits[i]`.
    ///
    /// `q: [nq, d]`, `k, v: [nk, d]`, `d = heads * head_dim`. Rows sharing a
    /// limit are processed as one block, so the work done is exactly the
    /// unmasked part of the score matrix.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        limits: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (nq, d) = matrix_dims(self.value(q))?;
        let (nk, dk) = matrix_dims(self.value(k))?;
        let (nv, dv) = matrix_dims(self.value(v))?;
        if dk != d || dv != d || nv != nk {
            return Err(Error::Dimension(format!(
                "attention: q [{nq},{d}], k [{nk},{dk}], v [{nv},{dv}]"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        if limits.len() != nq || limits.iter().any(|&l| l == 0 || l > nk) {
            return Err(Error::Range("attention limits must lie in 1..=keys".into()));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(heads);
        let mut macs = 0u64;
        for h in 0..heads {
            let off = h * hd;
            let mut p_all = Vec::new();
            for (start, len, lim) in limit_blocks(&limits) {
                let mut s = vec![0.0; len * lim];
                gemm(
                    len,
                    hd,
                    lim,
                    scale,
                    &tq[start * d + off..],
                    (d, 1),
                    &tk[off..],
                    (1, d),
                    &mut s,
                );
                for row in s.chunks_mut(lim) {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                let mut o = vec![0.0; len * hd];
                gemm(len, lim, hd, 1.0, &s, (lim, 1), &tv[off..], (d, 1), &mut o);
                for (i, orow) in o.chunks(hd).enumerate() {
                    out[(start + i) * d + off..(start + i) * d + off + hd].copy_from_slice(orow);
                }
                macs += 2 * (len * lim * hd) as u64;
                p_all.extend_from_slice(&s);
            }
            probs.push(p_all);
        }
        self.macs += macs;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                limits,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_stops(loss, &[])
    }

    /// Reverse pass that lets `stops` receive gradient but propagates
    /// nothing past them, as if they were detached for this loss only.
    pub fn backward_with_stops(&self, loss: Var, stops: &[Var]) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !stops.contains(&Var(i)) {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.acc(grads, *a, zip_map(g, tb, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let tb = self.value(*b);
                    let d = tb.len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (o, x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::MulCol(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let d = ta.shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = g.data().to_vec();
                    for (row, s) in ga.chunks_mut(d).zip(tw.data()) {
                        for x in row {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.requires_grad(*w) {
                    let gw = g
                        .data()
                        .chunks(d)
                        .zip(ta.data().chunks(d))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), (n, 1), tb.data(), (1, n), &mut ga);
                    self.acc(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, ta.data(), (1, k), g.data(), (n, 1), &mut gb);
                    self.acc(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, g.transpose().expect("2-d grad"));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let n = t.len();
                    if self.requires_grad(*p) {
                        let part = g.data()[off..off + n].to_vec();
                        self.acc(grads, *p, Tensor::from_parts(t.shape().to_vec(), part));
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let mut ga = vec![0.0; ta.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let mut ga = vec![0.0; ta.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    for (o, x) in ga[dst * c..(dst + 1) * c].iter_mut().zip(g.row(src)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::ScatterRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let mut ga = Vec::with_capacity(ta.len());
                for &dst in idx.iter() {
                    ga.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
                }
                self.acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::GatherElems(a, at) => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let mut ga = vec![0.0; ta.len()];
                for (k, &(r, col)) in at.iter().enumerate() {
                    ga[r * c + col] += g.data()[k];
                }
                self.acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, Tensor::full(ta.shape(), g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, Tensor::full(ta.shape(), g.item() / ta.len() as f64));
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.data().iter().map(|x| x / r as f64));
                }
                self.acc(grads, *a, Tensor::from_parts(vec![r, c], ga));
            }
            Op::Softmax(a, axis) => {
                let shape = y.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let (yd, gd) = (y.data(), g.data());
                let mut ga = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| yd[base + j * inner] * gd[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let at = base + j * inner;
                            ga[at] = yd[at] * (gd[at] - dot);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::from_parts(shape.to_vec(), ga));
            }
            Op::RowNormalize(a) => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let mut ga = vec![0.0; ta.len()];
                for r in 0..ta.len() / c {
                    let s: f64 = ta.row(r).iter().sum();
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, z)| x * z).sum();
                    for j in 0..c {
                        ga[r * c + j] = (g.row(r)[j] - dot) / s;
                    }
                }
                self.acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let ga = zip_map(g, ta, |gx, x| {
                    let s = sigmoid(x);
                    gx * (s + x * s * (1.0 - s))
                });
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let tx = self.value(*x);
                let c = *tx.shape().last().unwrap();
                let r = tx.len() / c;
                let gamma = self.value(*gain).data();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g.data()[i * c + j] * normalized[i * c + j];
                            gb[j] += g.data()[i * c + j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.acc(grads, *gain, Tensor::from_parts(gs, gg));
                    self.acc(grads, *bias, Tensor::from_parts(bs, gb));
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let xh = &normalized[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let gxh: Vec<f64> = gr.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let m1 = gxh.iter().sum::<f64>() / c as f64;
                        let m2 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] = inv_std[i] * (gxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                }
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                let c = y.item();
                let gs = g.item();
                if self.requires_grad(*a) {
                    let ga = zip_map(ta, tb, |x, z| gs * (z / (na * nb) - c * x / (na * na)));
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = zip_map(tb, ta, |z, x| gs * (x / (na * nb) - c * z / (nb * nb)));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Rope(x, table) => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let gx = apply_rotation(g.data(), n, d, table, true);
                self.acc(grads, *x, Tensor::from_parts(vec![n, d], gx));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                limits,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, limits, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        limits: &[usize],
        probs: &[Vec<f64>],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (tq.shape()[0], tq.shape()[1]);
        let nk = tk.shape()[0];
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let gd = g.data();
        for h in 0..heads {
            let off = h * hd;
            let mut poff = 0;
            for (start, len, lim) in limit_blocks(limits) {
                let p = &probs[h][poff..poff + len * lim];
                poff += len * lim;
                // dV[:lim] += P^T dO
                let mut dv = vec![0.0; lim * hd];
                gemm(lim, len, hd, 1.0, p, (1, lim), &gd[start * d + off..], (d, 1), &mut dv);
                // dP = dO V[:lim]^T
                let mut dp = vec![0.0; len * lim];
                gemm(len, hd, lim, 1.0, &gd[start * d + off..], (d, 1), &tv.data()[off..], (1, d), &mut dp);
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for (prow, drow) in p.chunks(lim).zip(dp.chunks_mut(lim)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (x, pv) in drow.iter_mut().zip(prow) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                let mut dq = vec![0.0; len * hd];
                gemm(len, lim, hd, 1.0, &dp, (lim, 1), &tk.data()[off..], (d, 1), &mut dq);
                let mut dk = vec![0.0; lim * hd];
                gemm(lim, len, hd, 1.0, &dp, (1, lim), &tq.data()[start * d + off..], (d, 1), &mut dk);
                for i in 0..len {
                    let dst = (start + i) * d + off;
                    for j in 0..hd {
                        gq[dst + j] += dq[i * hd + j];
                    }
                }
                for i in 0..lim {
                    for j in 0..hd {
                        gk[i * d + off + j] += dk[i * hd + j];
                        gv[i * d + off + j] += dv[i * hd + j];
                    }
                }
            }
        }
        self.acc(grads, q, Tensor::from_parts(vec![nq, d], gq));
        self.acc(grads, k, Tensor::from_parts(vec![nk, d], gk));
        self.acc(grads, v, Tensor::from_parts(vec![nk, d], gv));
    }
}

/// Maximal runs of consecutive rows sharing a limit: `(start, len, limit)`.
fn limit_blocks(limits: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &l) in limits.iter().enumerate() {
        match out.last_mut() {
            Some((_, len, lim)) if *lim == l => *len += 1,
            _ => out.push((i, 1, l)),
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn apply_rotation(src: &[f64], n: usize, d: usize, table: &RotationTable, inverse: bool) -> Vec<f64> {
    let half = table.half;
    let head = 2 * half;
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let cos = &table.cos[t * half..(t + 1) * half];
        let sin = &table.sin[t * half..(t + 1) * half];
        for h in 0..d / head {
            let base = t * d + h * head;
            for i in 0..half {
                let (x0, x1) = (src[base + 2 * i], src[base + 2 * i + 1]);
                let s = if inverse { -sin[i] } else { sin[i] };
                out[base + 2 * i] = x0 * cos[i] - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * cos[i];
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path
    /// from a trainable leaf to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that was read by the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}
