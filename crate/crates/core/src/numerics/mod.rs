//! Tensor primitives recorded on a tape for reverse-mode differentiation.
//!
//! A [`Tape`] is the computation record of one forward pass. Every primitive
//! appends a node holding its output value and whatever it needs for the
//! backward pass, so node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use dua::numerics::{ParamStore, Tape};
//! use dua::Tensor;
//!
//! let mut store = ParamStore::new();
//! store.insert("x", Tensor::row(vec![1.0, 2.0]));
//! let mut tape = Tape::new();
//! let x = tape.param(&store, "x").unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss, &store).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod params;

use std::collections::HashMap;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{Gradients, ParamStore};

use crate::error::{contract, DuaError, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over all elements of `values`.
pub fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    OneMinus(Var),
    Scale(Var, f64),
    Activation(Activation, Var),
    Softmax(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    StackRows(Vec<Var>),
    ConcatFlat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    Transpose(Var),
    Sum(Var),
    PadTo(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    guard: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Non-finite guards are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            guard: cfg!(debug_assertions),
        }
    }

    pub fn with_guard(mut self, enabled: bool) -> Self {
        self.guard = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.guard && !value.is_finite() {
            return Err(DuaError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (s[0], s[1])
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(DuaError::Dimension {
                op,
                left: s.to_vec(),
                right: vec![2],
            });
        }
        Ok((s[0], s[1]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> DuaError {
        DuaError::Dimension {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaf that does not receive a gradient entry.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (m, n) = self.rank2(a, op)?;
        let (r, n2) = self.rank2(row, op)?;
        if r != 1 || n != n2 {
            return Err(self.mismatch(op, a, row));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(vec![m, n], data)
    }

    /// `a + row` with `row: 1×n` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        self.push(t, Op::AddRow(a, row), "add_row")
    }

    /// `a ⊙ row` with `row: 1×n` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        self.push(t, Op::MulRow(a, row), "mul_row")
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| 1.0 - x);
        self.push(t, Op::OneMinus(a), "one_minus")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor), "scale")
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| kind.apply(x));
        self.push(t, Op::Activation(kind, a), kind.name())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Relu, a)
    }

    /// Softmax over all elements (use on `1×n` or `n×1`).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(DuaError::Dimension {
                op: "softmax",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let data = softmax_slice(v.data());
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// `[a, b]` along columns; both must have the same row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.rank2(a, "concat_cols")?;
        let (m2, nb) = self.rank2(b, "concat_cols")?;
        if m != m2 {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(self.value(a).row_slice(i));
            data.extend_from_slice(self.value(b).row_slice(i));
        }
        self.push(Tensor::new(vec![m, na + nb], data)?, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Repeats a `1×n` row `times` times.
    pub fn repeat_rows(&mut self, row: Var, times: usize) -> Result<Var> {
        let (r, n) = self.rank2(row, "repeat_rows")?;
        if r != 1 || times == 0 {
            return contract(format!("repeat_rows needs a 1×n row and times ≥ 1, got {r}×{n}, {times}"));
        }
        let data = self.value(row).data().repeat(times);
        self.push(Tensor::new(vec![times, n], data)?, Op::RepeatRows(row), "repeat_rows")
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("stack_rows of nothing");
        };
        let (_, n) = self.rank2(first, "stack_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, np) = self.rank2(p, "stack_rows")?;
            if np != n {
                return Err(self.mismatch("stack_rows", first, p));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![rows, n], data)?, Op::StackRows(parts.to_vec()), "stack_rows")
    }

    /// Row-major flatten of every part, concatenated into one `1×N` row.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat_flat of nothing");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        self.push(Tensor::new(vec![1, n], data)?, Op::ConcatFlat(parts.to_vec()), "concat_flat")
    }

    /// Gathers rows by index (embedding lookup when `a` is a table).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2(a, "select_rows")?;
        if indices.is_empty() {
            return contract("select_rows with no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(DuaError::Dimension {
                op: "select_rows",
                left: vec![m, n],
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.value(a).row_slice(i));
        }
        self.push(
            Tensor::new(vec![indices.len(), n], data)?,
            Op::SelectRows(a, indices.to_vec()),
            "select_rows",
        )
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.select_rows(a, &[index])
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(DuaError::Dimension {
                op: "slice_rows",
                left: vec![m, n],
                right: vec![start, len],
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(vec![len, n], data)?, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.rank2(a, "transpose")?;
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), "transpose")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.nodes.push(Node {
            value: Tensor::scalar(s),
            op: Op::Sum(a),
        });
        Var(self.nodes.len() - 1)
    }

    /// Zero-pads on the bottom and right up to `rows × cols`.
    pub fn pad_to(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.rank2(a, "pad_to")?;
        if rows < m || cols < n {
            return Err(DuaError::Dimension {
                op: "pad_to",
                left: vec![m, n],
                right: vec![rows, cols],
            });
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for i in 0..m {
            out.data_mut()[i * cols..i * cols + n].copy_from_slice(self.value(a).row_slice(i));
        }
        self.push(out, Op::PadTo(a), "pad_to")
    }

    /// Valid cross-correlation with stride 1 plus a `1×1` bias.
    pub fn conv2d_valid(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w) = self.rank2(input, "conv2d_valid")?;
        let (kh, kw) = self.rank2(kernel, "conv2d_valid")?;
        if kh > h || kw > w {
            return Err(self.mismatch("conv2d_valid", input, kernel));
        }
        if self.value(bias).len() != 1 {
            return Err(self.mismatch("conv2d_valid", kernel, bias));
        }
        let out = conv2d_forward(self.value(input), self.value(kernel), self.value(bias).data()[0]);
        self.push(out, Op::Conv2d { input, kernel, bias }, "conv2d_valid")
    }

    /// Non-overlapping max pooling with window = stride; ragged edge windows
    /// take the max of the cells they cover.
    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let (h, w) = self.rank2(input, "maxpool2d")?;
        if window.0 == 0 || window.1 == 0 {
            return contract("pool window must be positive");
        }
        let (out, argmax) = maxpool_forward(self.value(input), window);
        debug_assert_eq!(out.len(), h.div_ceil(window.0) * w.div_ceil(window.1));
        self.push(out, Op::MaxPool { input, argmax }, "maxpool2d")
    }

    /// `-log softmax(logits)[label]` for a `1×C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.rank2(logits, "cross_entropy")?;
        if r != 1 || label >= c {
            return contract(format!("cross_entropy label {label} for logits {r}×{c}"));
        }
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let probs = softmax_slice(z);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label, probs },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. Every parameter in `store` gets an
    /// entry; parameters not reached by the record get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::zeros_like(store);
        for (name, var) in &self.params {
            if let (Some(slot), Some(Some(g))) = (out.get_mut(name), grads.get(var.0)) {
                *slot = g.clone();
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let da = matmul_nt(gd, self.value(*b).data(), m, n, k);
                let db = matmul_tn(self.value(*a).data(), gd, m, k, n);
                acc(*a, Tensor::new(vec![m, k], da).expect("shape"));
                acc(*b, Tensor::new(vec![k, n], db).expect("shape"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                let n = self.dims(*row).1;
                let mut dr = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*a, g.clone());
                acc(*row, Tensor::row(dr));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let da = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(va.shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(vb.shape().to_vec(), db).expect("shape"));
            }
            Op::MulRow(a, row) => {
                let va = self.value(*a);
                let vr = self.value(*row).data();
                let n = vr.len();
                let mut dr = vec![0.0; n];
                let mut da = Vec::with_capacity(gd.len());
                for (gc, ac) in gd.chunks(n).zip(va.data().chunks(n)) {
                    for j in 0..n {
                        da.push(gc[j] * vr[j]);
                        dr[j] += gc[j] * ac[j];
                    }
                }
                acc(*a, Tensor::new(va.shape().to_vec(), da).expect("shape"));
                acc(*row, Tensor::row(dr));
            }
            Op::OneMinus(a) => acc(*a, g.map(|x| -x)),
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::Activation(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot: f64 = gd.iter().zip(y).map(|(x, y)| x * y).sum();
                let d = gd.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.dims(*a);
                let nb = self.dims(*b).1;
                let mut da = Vec::with_capacity(m * na);
                let mut db = Vec::with_capacity(m * nb);
                for row in gd.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                acc(*a, Tensor::new(vec![m, na], da).expect("shape"));
                acc(*b, Tensor::new(vec![m, nb], db).expect("shape"));
            }
            Op::RepeatRows(row) => {
                let n = self.dims(*row).1;
                let mut dr = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*row, Tensor::row(dr));
            }
            Op::StackRows(parts) | Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = self.value(p).len();
                    let d = gd[offset..offset + len].to_vec();
                    offset += len;
                    acc(p, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::SelectRows(a, indices) => {
                let (m, n) = self.dims(*a);
                let mut d = Tensor::zeros(&[m, n]);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * n..(i + 1) * n];
                    for (x, y) in dst.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *x += y;
                    }
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.dims(*a);
                let mut d = Tensor::zeros(&[m, n]);
                d.data_mut()[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, Tensor::filled(self.shape(*a), s));
            }
            Op::PadTo(a) => {
                let (m, n) = self.dims(*a);
                let cols = g.cols();
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    d.extend_from_slice(&gd[i * cols..i * cols + n]);
                }
                acc(*a, Tensor::new(vec![m, n], d).expect("shape"));
            }
            Op::Conv2d { input, kernel, bias } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (kh, kw) = (k.rows(), k.cols());
                let (oh, ow) = (g.rows(), g.cols());
                let mut dx = Tensor::zeros(x.shape());
                let mut dk = Tensor::zeros(k.shape());
                let mut db = 0.0;
                for i in 0..oh {
                    for j in 0..ow {
                        let go = gd[i * ow + j];
                        if go == 0.0 {
                            continue;
                        }
                        db += go;
                        for a in 0..kh {
                            for b in 0..kw {
                                let xi = (i + a) * x.cols() + j + b;
                                dk.data_mut()[a * kw + b] += go * x.data()[xi];
                                dx.data_mut()[xi] += go * k.data()[a * kw + b];
                            }
                        }
                    }
                }
                acc(*input, dx);
                acc(*kernel, dk);
                acc(*bias, Tensor::filled(self.shape(*bias), db));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = Tensor::zeros(self.shape(*input));
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d.data_mut()[src] += gv;
                }
                acc(*input, d);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = gd[0];
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| s * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                acc(*logits, Tensor::row(d));
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, bias: f64) -> Tensor {
    let (h, w) = (x.rows(), x.cols());
    let (kh, kw) = (k.rows(), k.cols());
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for a in 0..kh {
                let xrow = &x.data()[(i + a) * w + j..(i + a) * w + j + kw];
                let krow = &k.data()[a * kw..(a + 1) * kw];
                for (xv, kv) in xrow.iter().zip(krow) {
                    s += kv * xv;
                }
            }
            out[i * ow + j] = s + bias;
        }
    }
    Tensor::new(vec![oh, ow], out).expect("conv output shape")
}

fn maxpool_forward(x: &Tensor, window: (usize, usize)) -> (Tensor, Vec<usize>) {
    let (h, w) = (x.rows(), x.cols());
    let (ph, pw) = (h.div_ceil(window.0), w.div_ceil(window.1));
    let mut out = Vec::with_capacity(ph * pw);
    let mut argmax = Vec::with_capacity(ph * pw);
    for pi in 0..ph {
        for pj in 0..pw {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = usize::MAX;
            for i in pi * window.0..((pi + 1) * window.0).min(h) {
                for j in pj * window.1..((pj + 1) * window.1).min(w) {
                    let v = x.data()[i * w + j];
                    if best_idx == usize::MAX || v > best {
                        best = v;
                        best_idx = i * w + j;
                    }
                }
            }
            out.push(best);
            argmax.push(best_idx);
        }
    }
    (Tensor::new(vec![ph, pw], out).expect("pool shape"), argmax)
}

#[cfg(test)]
mod tests;
