use std::collections::HashMap;
use std::ops::Range;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{add_into, matmul_nn, matmul_nt, matmul_tn, transpose};
use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeReduction {
    /// Average over non-ignored rows.
    Mean,
    /// Sum over non-ignored rows.
    Sum,
}

/// Bookkeeping returned alongside a cross-entropy value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeStats {
    /// Number of rows that contributed.
    pub count: usize,
    /// Set when every row was ignored; the loss is then defined as 0.
    pub empty: bool,
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    IndexRows { src: Var, idx: Vec<usize> },
    ScatterRows { src: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var>, last_axis: bool },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Gelu(Var),
    Relu(Var),
    RowScale(Var, Var),
    RowNormalize { x: Var, floor: T },
    GatherElems { a: Var, flat: Vec<usize> },
    Permute01(Var),
    Transpose(Var),
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, coef: Vec<T>, eps: T, probs: Vec<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass. Single-owner; parameter values
/// are borrowed from a [`ParamStore`] without copying.
pub struct Tape<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape without a parameter store; only leaves and constants.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param leaf without store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter leaf (once per parameter per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("param() on a detached tape");
        let needs_grad = store.get(id).requires_grad;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, mk(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a[.., d] + b[d]`, broadcasting `b` over the leading axes.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.last_dim();
        if tb.rank() != 1 || tb.len() != d {
            return Err(mismatch("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, tb.data());
        }
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    /// `a[.., k] x b[k, n]` with the leading axes of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() == 0 || tb.rank() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over the leading axis: `a[B,m,k] x b[B,k,n]`, or
    /// `a[B,m,k] x b[B,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch("bmm", ta.shape(), tb.shape()));
        }
        let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(mismatch("bmm", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(bsz * m * n);
        for i in 0..bsz {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let c = if trans_b {
                matmul_nt(ab, bb, m, k, n)
            } else {
                matmul_nn(ab, bb, m, k, n)
            };
            data.extend_from_slice(&c);
        }
        let out = Tensor::new(&[bsz, m, n], data)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis. `keep`, when given, is broadcast over the
    /// leading axes (its length must divide the tensor size and be a
    /// multiple of the last axis); dropped entries get exactly zero weight,
    /// and a fully dropped row is all zeros.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if let Some(k) = keep {
            if k.is_empty() || k.len() % d != 0 || tx.len() % k.len() != 0 {
                return Err(mismatch("softmax", tx.shape(), &[k.len()]));
            }
        }
        let mut data = vec![T::zero(); tx.len()];
        for (r, (row, out)) in tx.data().chunks(d).zip(data.chunks_mut(d)).enumerate() {
            let kept = |j: usize| match keep {
                Some(k) => k[(r * d + j) % k.len()],
                None => true,
            };
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    let e = (v - mx).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.len() != d || tb.len() != d || tg.rank() != 1 || tb.rank() != 1 {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let n = tx.rows();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); n];
        let mut data = vec![T::zero(); tx.len()];
        let dn = T::of(d as f64);
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Row gather: `out[i] = src[idx[i]]` over the first axis. Embedding
    /// lookup is `index_rows(table, ids)`.
    pub fn index_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        if ts.rank() == 0 {
            return Err(invalid("index_rows", "scalar source"));
        }
        let rows = ts.shape()[0];
        let inner: usize = ts.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= rows {
                return Err(invalid("index_rows", format!("index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&ts.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = ts.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::IndexRows { src, idx: idx.to_vec() }, &[src]))
    }

    /// Row scatter-add into `n_rows` zero rows: `out[idx[i]] += src[i]`.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let ts = self.value(src);
        if ts.rank() == 0 || ts.shape()[0] != idx.len() {
            return Err(mismatch("scatter_rows", ts.shape(), &[idx.len()]));
        }
        let inner: usize = ts.shape()[1..].iter().product();
        let mut data = vec![T::zero(); n_rows * inner];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= n_rows {
                return Err(invalid("scatter_rows", format!("index {dst} out of range for {n_rows} rows")));
            }
            add_into(&mut data[dst * inner..(dst + 1) * inner], &ts.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = ts.shape().to_vec();
        shape[0] = n_rows;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::ScatterRows { src, idx: idx.to_vec() }, &[src]))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(invalid("concat_rows", "scalar input"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.len() || t.shape()[1..] != first[1..] {
                return Err(mismatch("concat_rows", &first, t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = rows;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), last_axis: false }, parts))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(invalid("concat_cols", "scalar input"));
        }
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.len() || &t.shape()[..t.rank() - 1] != lead {
                return Err(mismatch("concat_cols", &first, t.shape()));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), last_axis: true }, parts))
    }

    /// Slice along the first axis.
    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || range.start > range.end || range.end > t.shape()[0] {
            return Err(invalid("slice_rows", format!("range {range:?} on shape {:?}", t.shape())));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let data = t.data()[range.start * inner..range.end * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = range.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SliceRows { a, start: range.start }, &[a]))
    }

    /// Slice along the last axis.
    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        if t.rank() == 0 || range.start > range.end || range.end > d {
            return Err(invalid("slice_cols", format!("range {range:?} on shape {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(t.rows() * range.len());
        for row in t.data().chunks(d) {
            data.extend_from_slice(&row[range.clone()]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = range.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SliceCols { a, start: range.start }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = t.sum() / T::of(t.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Mean over every axis but the last: `[.., d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = (t.rows(), t.last_dim());
        if n == 0 {
            return Err(invalid("mean_rows", "no rows"));
        }
        let mut acc = vec![T::zero(); d];
        for row in t.data().chunks(d) {
            add_into(&mut acc, row);
        }
        let inv = T::one() / T::of(n as f64);
        for v in &mut acc {
            *v *= inv;
        }
        let out = Tensor::new(&[d], acc)?;
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    /// `x[n, d] * s[n]` row-wise.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.rank() != 1 || ts.len() != tx.rows() {
            return Err(mismatch("row_scale", tx.shape(), ts.shape()));
        }
        let d = tx.last_dim();
        let mut data = tx.data().to_vec();
        for (row, &sv) in data.chunks_mut(d).zip(ts.data()) {
            for v in row {
                *v *= sv;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, Op::RowScale(x, s), &[x, s]))
    }

    /// Divides each row by `max(row_sum, floor)`.
    pub fn row_normalize(&mut self, x: Var, floor: T) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let s = row.iter().copied().sum::<T>().max(floor);
            for v in row {
                *v /= s;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, Op::RowNormalize { x, floor }, &[x]))
    }

    /// Gathers elements by flat index into a rank-1 tensor.
    pub fn gather_elems(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= t.len() {
                return Err(invalid("gather_elems", format!("index {i} out of range for {}", t.len())));
            }
            data.push(t.data()[i]);
        }
        let out = Tensor::new(&[flat.len()], data)?;
        Ok(self.push(out, Op::GatherElems { a, flat: flat.to_vec() }, &[a]))
    }

    /// `[A, B, C] -> [B, A, C]`.
    pub fn permute01(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(invalid("permute01", format!("expected rank 3, got {:?}", t.shape())));
        }
        let (p, q, r) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let data = permute01_data(t.data(), p, q, r);
        let out = Tensor::new(&[q, p, r], data)?;
        Ok(self.push(out, Op::Permute01(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::new(&[n, m], transpose(t.data(), m, n))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Label-smoothed cross-entropy of `logits[n, V]` against `targets`.
    /// Target mass is `1 - eps`, every other class gets `eps / (V - 1)`.
    /// Rows with `weights[i] == 0` are ignored. When every row is ignored the
    /// loss is 0 and `CeStats::empty` is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[bool],
        eps: T,
        reduction: CeReduction,
    ) -> Result<(Var, CeStats)> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.last_dim());
        if targets.len() != n || weights.len() != n {
            return Err(mismatch("cross_entropy", t.shape(), &[targets.len(), weights.len()]));
        }
        if eps > T::zero() && v < 2 {
            return Err(invalid("cross_entropy", "label smoothing needs at least two classes"));
        }
        let off = if v > 1 { eps / T::of((v - 1) as f64) } else { T::zero() };
        let on = T::one() - eps;
        let count = weights.iter().filter(|&&w| w).count();
        let scale = match reduction {
            CeReduction::Sum => T::one(),
            CeReduction::Mean if count > 0 => T::one() / T::of(count as f64),
            CeReduction::Mean => T::zero(),
        };
        let mut probs = vec![T::zero(); n * v];
        let mut coef = vec![T::zero(); n];
        let mut total = T::zero();
        for i in 0..n {
            if !weights[i] {
                continue;
            }
            let tgt = targets[i];
            if tgt >= v {
                return Err(invalid("cross_entropy", format!("target {tgt} outside vocabulary of {v}")));
            }
            let row = &t.data()[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            let mut loss = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let logp = x - lse;
                probs[i * v + j] = logp.exp();
                let q = if j == tgt { on } else { off };
                if q != T::zero() {
                    loss -= q * logp;
                }
            }
            coef[i] = scale;
            total += loss;
        }
        let value = Tensor::scalar(total * scale);
        let var = self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                coef,
                eps,
                probs,
            },
            &[logits],
        );
        Ok((var, CeStats { count, empty: count == 0 }))
    }

    /// Runs reverse-mode differentiation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rt = self.value(root);
        if rt.len() != 1 || rt.rank() > 1 {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if node.needs_grad {
                    let g = grads[i]
                        .clone()
                        .unwrap_or_else(|| vec![T::zero(); self.value(Var(i)).len()]);
                    params.push((id, Tensor::new(self.value(Var(i)).shape(), g)?));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: (0..self.nodes.len()).map(|i| self.value(Var(i)).shape().to_vec()).collect(),
            params: ParamGrads { grads: params },
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut give = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    give(*a, g.iter().zip(tb).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    give(*b, g.iter().zip(ta).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, b) => {
                give(*a, g.to_vec());
                if needs(*b) {
                    let d = self.value(*b).len();
                    let mut acc = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        add_into(&mut acc, row);
                    }
                    give(*b, acc);
                }
            }
            Op::Scale(a, c) => give(*a, g.iter().map(|&x| x * *c).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
                if needs(*a) {
                    give(*a, matmul_nt(g, tb.data(), m, n, k));
                }
                if needs(*b) {
                    give(*b, matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for s in 0..bsz {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let as_ = &ta.data()[s * m * k..(s + 1) * m * k];
                    let bs = &tb.data()[s * k * n..(s + 1) * k * n];
                    if *trans_b {
                        // C = A B^T with B[n,k]
                        if needs(*a) {
                            ga.extend(matmul_nn(gs, bs, m, n, k));
                        }
                        if needs(*b) {
                            gb.extend(matmul_tn(gs, as_, m, n, k));
                        }
                    } else {
                        if needs(*a) {
                            ga.extend(matmul_nt(gs, bs, m, n, k));
                        }
                        if needs(*b) {
                            gb.extend(matmul_tn(as_, gs, m, k, n));
                        }
                    }
                }
                if needs(*a) {
                    give(*a, ga);
                }
                if needs(*b) {
                    give(*b, gb);
                }
            }
            Op::Softmax(x) => {
                let y = out.data();
                let d = out.last_dim();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), or) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                give(*x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma).data();
                let d = tg.len();
                let dn = T::of(d as f64);
                if needs(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gr[j] * tg[j];
                            gx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    give(*x, gx);
                }
                if needs(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    give(*gamma, gg);
                }
                if needs(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        add_into(&mut gb, gr);
                    }
                    give(*beta, gb);
                }
            }
            Op::IndexRows { src, idx } => {
                let ts = self.value(*src);
                let inner: usize = ts.shape()[1..].iter().product();
                let mut gs = vec![T::zero(); ts.len()];
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut gs[r * inner..(r + 1) * inner], &g[k * inner..(k + 1) * inner]);
                }
                give(*src, gs);
            }
            Op::ScatterRows { src, idx } => {
                let ts = self.value(*src);
                let inner: usize = ts.shape()[1..].iter().product();
                let mut gs = Vec::with_capacity(ts.len());
                for &r in idx {
                    gs.extend_from_slice(&g[r * inner..(r + 1) * inner]);
                }
                give(*src, gs);
            }
            Op::Concat { parts, last_axis } => {
                if *last_axis {
                    let total = out.last_dim();
                    let rows = out.rows();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        if needs(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                            }
                            give(p, gp);
                        }
                        col += w;
                    }
                } else {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if needs(p) {
                            give(p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let ta = self.value(*a);
                let inner: usize = ta.shape()[1..].iter().product();
                let mut ga = vec![T::zero(); ta.len()];
                ga[start * inner..start * inner + g.len()].copy_from_slice(g);
                give(*a, ga);
            }
            Op::SliceCols { a, start } => {
                let ta = self.value(*a);
                let d = ta.last_dim();
                let w = out.last_dim();
                let mut ga = vec![T::zero(); ta.len()];
                for (r, gr) in g.chunks(w.max(1)).enumerate().take(ta.rows()) {
                    ga[r * d + start..r * d + start + w].copy_from_slice(gr);
                }
                give(*a, ga);
            }
            Op::Sum(a) => give(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                give(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let inv = T::one() / T::of(ta.rows() as f64);
                let gs: Vec<T> = g.iter().map(|&x| x * inv).collect();
                let mut ga = Vec::with_capacity(ta.len());
                for _ in 0..ta.rows() {
                    ga.extend_from_slice(&gs);
                }
                give(*a, ga);
            }
            Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let ga = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gv * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                give(*a, ga);
            }
            Op::Relu(a) => {
                let ga = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                give(*a, ga);
            }
            Op::RowScale(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let d = tx.last_dim();
                if needs(*x) {
                    let mut gx = g.to_vec();
                    for (row, &sv) in gx.chunks_mut(d).zip(ts.data()) {
                        for v in row {
                            *v *= sv;
                        }
                    }
                    give(*x, gx);
                }
                if needs(*s) {
                    let gs = g
                        .chunks(d)
                        .zip(tx.data().chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    give(*s, gs);
                }
            }
            Op::RowNormalize { x, floor } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let y = out.data();
                let mut gx = vec![T::zero(); tx.len()];
                for r in 0..tx.rows() {
                    let xr = &tx.data()[r * d..(r + 1) * d];
                    let raw: T = xr.iter().copied().sum();
                    let s = raw.max(*floor);
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let dot: T = if raw > *floor {
                        gr.iter().zip(yr).map(|(&a, &b)| a * b).sum()
                    } else {
                        T::zero()
                    };
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - dot) / s;
                    }
                }
                give(*x, gx);
            }
            Op::GatherElems { a, flat } => {
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for (k, &i) in flat.iter().enumerate() {
                    ga[i] += g[k];
                }
                give(*a, ga);
            }
            Op::Permute01(a) => {
                let s = out.shape();
                give(*a, permute01_data(g, s[0], s[1], s[2]));
            }
            Op::Transpose(a) => {
                let s = out.shape();
                give(*a, transpose(g, s[0], s[1]));
            }
            Op::Reshape(a) => give(*a, g.to_vec()),
            Op::CrossEntropy { logits, targets, coef, eps, probs } => {
                let v = self.value(*logits).last_dim();
                let off = if v > 1 { *eps / T::of((v - 1) as f64) } else { T::zero() };
                let on = T::one() - *eps;
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &c) in coef.iter().enumerate() {
                    if c == T::zero() {
                        continue;
                    }
                    let f = c * g[0];
                    for j in 0..v {
                        let q = if j == targets[r] { on } else { off };
                        gl[r * v + j] = f * (probs[r * v + j] - q);
                    }
                }
                give(*logits, gl);
            }
        }
    }
}

fn permute01_data<T: Scalar>(src: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..p {
        for j in 0..q {
            out[(j * p + i) * r..(j * p + i + 1) * r].copy_from_slice(&src[(i * q + j) * r..(i * q + j + 1) * r]);
        }
    }
    out
}

/// Result of [`Tape::backward`]: per-node gradients plus the gradients of
/// every parameter leaf. Independent of the tape's lifetime.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: ParamGrads<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}
