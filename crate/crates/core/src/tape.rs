//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every primitive checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of letting bad values spread.
//!
//! Broadcasting is limited to two explicit primitives: [`Tape::add_row`] (a
//! row vector added to every matrix row) and [`Tape::scale_rows`] (each row
//! scaled by its own entry of a column). All other binary ops need equal shapes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Reshape(Var),
    Permute3(Var, [usize; 3]),
    ConcatLast(Vec<Var>),
    Stack(Vec<Var>),
    Select0(Var, usize),
    RowOuter(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn wrt_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient (data, fixed operators).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Sum of a list of equal-shaped values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::dim("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `a[i, :] + row` for a matrix `a` (m×n) and a row of n entries
    /// (shape `[n]` or `[1, n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let n = *sr.last().unwrap();
        let row_ok = sr.iter().product::<usize>() == n;
        if sa.len() != 2 || sa[1] != n || !row_ok {
            return Err(Error::dim("add_row", format!("{sa:?} + row {sr:?}")));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    /// Row `i` of `a` multiplied by `scores[i]`; `scores` is m×1.
    pub fn scale_rows(&mut self, a: Var, scores: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(scores));
        if sa.len() != 2 || ss != [sa[0], 1] {
            return Err(Error::dim("scale_rows", format!("{sa:?} by {ss:?}")));
        }
        let n = sa[1];
        let mut value = self.value(a).clone();
        let s = self.value(scores).data().to_vec();
        for (chunk, k) in value.data_mut().chunks_mut(n).zip(&s) {
            for v in chunk {
                *v *= k;
            }
        }
        self.push("scale_rows", value, Op::ScaleRows(a, scores), &[a, scores])
    }

    /// `factor * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> Result<Var> {
        let value = self.value(a).map(|x| factor * x + offset);
        self.push("affine", value, Op::Affine(a, factor), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// Elementwise `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    /// |a| with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        self.push("abs", value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a), &[a])
    }

    /// `ln(max(a, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push("log", value, Op::LogClamped(a, floor), &[a])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("softmax_rows", format!("rank {}", s.len())));
        }
        let n = s[1];
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Output axis `k` is input axis `perm[k]` (rank 3 only).
    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Result<Var> {
        let value = self.value(a).permute3(perm)?;
        self.push("permute3", value, Op::Permute3(a, perm), &[a])
    }

    /// `[T, M, d] -> [M, d*T]` with `out[m, t*d + c] = in[t, m, c]`.
    pub fn merge_dims_13(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("merge_dims_13", format!("rank {}", s.len())));
        }
        let p = self.permute3(a, [1, 0, 2])?;
        self.reshape(p, &[s[1], s[0] * s[2]])
    }

    /// Inverse of [`Tape::merge_dims_13`] for a known frame count.
    pub fn unmerge_dims_13(&mut self, a: Var, frames: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || frames == 0 || !s[1].is_multiple_of(frames) {
            return Err(Error::dim(
                "unmerge_dims_13",
                format!("{s:?} into {frames} frames"),
            ));
        }
        let r = self.reshape(a, &[s[0], frames, s[1] / frames])?;
        self.permute3(r, [1, 0, 2])
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_last", "no parts"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last", format!("{s:?} vs lead {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push("concat_last", value, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Stacks equal-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::stack(&values)?;
        self.push("stack", value, Op::Stack(parts.to_vec()), parts)
    }

    /// Slice `index` along axis 0, dropping the axis.
    pub fn select0(&mut self, a: Var, index: usize) -> Result<Var> {
        let value = self.value(a).select0(index)?;
        self.push("select0", value, Op::Select0(a, index), &[a])
    }

    /// Per-row outer product: `[m, n] -> [m, n*n]`, `out[i, a*n+b] = x[i,a] x[i,b]`.
    pub fn row_outer(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("row_outer", format!("rank {}", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * n * n);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            for &p in row {
                for &q in row {
                    data.push(p * q);
                }
            }
        }
        let value = Tensor::new(vec![m, n * n], data)?;
        self.push("row_outer", value, Op::RowOuter(a), &[a])
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose().unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (s, x) in d.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    let shape = self.shape(*row).to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, d).unwrap());
                }
            }
            Op::ScaleRows(a, s) => {
                let n = g.cols();
                let sv = self.value(*s).data();
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (chunk, k) in d.data_mut().chunks_mut(n).zip(sv) {
                        for v in chunk {
                            *v *= k;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*s) {
                    let av = self.value(*a).data();
                    let d: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(av.chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, d).unwrap());
                }
            }
            Op::Affine(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |x, y| x * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |x, y| x * (1.0 - y * y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .zip_map(self.value(*a), |x, v| {
                        if v > 0.0 {
                            x
                        } else if v < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |x, v| 2.0 * v * x).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::LogClamped(a, floor) => {
                let d = g
                    .zip_map(self.value(*a), |x, v| if v > *floor { x / v } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (dv, y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Tensor::filled(self.shape(*a), g.item());
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(*a)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Permute3(a, perm) => {
                let mut inv = [0usize; 3];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                self.accumulate(grads, *a, g.permute3(inv).unwrap());
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let start = r * total + offset;
                            d.extend_from_slice(&g.data()[start..start + w]);
                        }
                        let shape = self.shape(p).to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        self.accumulate(grads, p, g.select0(i).unwrap());
                    }
                }
            }
            Op::Select0(a, index) => {
                let mut d = Tensor::zeros(self.shape(*a));
                let inner = g.len();
                d.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::RowOuter(a) => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n * n..(i + 1) * n * n];
                    for p in 0..n {
                        let mut acc = 0.0;
                        for q in 0..n {
                            acc += (gr[p * n + q] + gr[q * n + p]) * xr[q];
                        }
                        d[i * n + p] = acc;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], d).unwrap());
            }
        }
    }
}
