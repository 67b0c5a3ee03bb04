//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes in exact reverse order and adds each node's contribution into the
//! gradient buffers of its inputs. Nodes that do not depend on any
//! gradient-requiring leaf are never differentiated.

use std::borrow::Cow;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, softmax_into};
use super::tensor::Tensor;
use crate::error::{DplError, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// QuickGELU slope, `x * sigmoid(1.702 x)`.
const GELU_SLOPE: f64 = 1.702;

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
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRow(Var, usize),
    StackRows(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    QuickGelu(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    Sum(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    KlDivergence {
        teacher: Var,
        student: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SelectRow(..) => "select_row",
            Op::StackRows(..) => "stack_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::QuickGelu(..) => "quick_gelu",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDivergence { .. } => "kl_divergence",
        }
    }
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass. Constants may be borrowed for the
/// lifetime `'a` so frozen weights are never copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into the slot of `tensor`. Missing gradients
    /// (the node did not influence the loss) add zeros.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }

    /// Node indices whose backward rule ran, in the order it ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape is consistent")
    }

    /// Borrows a tensor as a constant (no gradient).
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Borrowed(t.values()), false, Op::Leaf)
    }

    /// Owned constant from raw values.
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(DplError::dims("input", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, Cow::Owned(values), false, Op::Leaf))
    }

    /// Copies a tensor onto the tape as a leaf. It is differentiated when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Owned(t.values().to_vec()), requires_grad, Op::Leaf)
    }

    /// Leaf from raw values that requires gradient.
    pub fn param(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(DplError::dims("param", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, Cow::Owned(values), true, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(DplError::dims("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, Cow::Owned(out), rg, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(DplError::dims("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, Cow::Owned(out), rg, Op::MatMulNT(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(DplError::dims(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, Cow::Owned(out), rg, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(DplError::dims("add_row", &[r, c], &[rr, rc]));
        }
        let b = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            chunk.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(r, c, Cow::Owned(out), rg, Op::AddRow(a, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, Cow::Owned(out), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(a);
        self.push(r, c, Cow::Owned(out), rg, Op::Scale(a, factor))
    }

    /// Stacks `top` above `bottom`. Either may have zero rows.
    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let (r1, c1) = self.dims(top);
        let (r2, c2) = self.dims(bottom);
        if c1 != c2 {
            return Err(DplError::dims("concat_rows", &[r1, c1], &[r2, c2]));
        }
        let mut out = Vec::with_capacity((r1 + r2) * c1);
        out.extend_from_slice(self.value(top));
        out.extend_from_slice(self.value(bottom));
        let rg = self.rg(top) || self.rg(bottom);
        Ok(self.push(r1 + r2, c1, Cow::Owned(out), rg, Op::ConcatRows(top, bottom)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| DplError::contract("concat_cols of nothing"))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(DplError::dims("concat_cols", &[rows, total], &[r, c]));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, total, Cow::Owned(out), rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + width > c {
            return Err(DplError::Index {
                what: "column slice",
                index: start + width,
                len: c,
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for row in 0..r {
            out.extend_from_slice(&v[row * c + start..row * c + start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(r, width, Cow::Owned(out), rg, Op::SliceCols(a, start)))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if row >= r {
            return Err(DplError::Index {
                what: "row",
                index: row,
                len: r,
            });
        }
        let out = self.value(a)[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(1, c, Cow::Owned(out), rg, Op::SelectRow(a, row)))
    }

    /// Stacks single-row nodes into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cols = rows
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| DplError::contract("stack_rows of nothing"))?;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &p in rows {
            let (r, c) = self.dims(p);
            if r != 1 || c != cols {
                return Err(DplError::dims("stack_rows", &[1, cols], &[r, c]));
            }
            out.extend_from_slice(self.value(p));
        }
        let rg = rows.iter().any(|&p| self.rg(p));
        Ok(self.push(rows.len(), cols, Cow::Owned(out), rg, Op::StackRows(rows.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        if c > 0 {
            for (src, dst) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
                softmax_into(src, dst);
            }
        }
        let rg = self.rg(a);
        self.push(r, c, Cow::Owned(out), rg, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gain` and `bias` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DplError::contract("layer_norm eps must be positive"));
        }
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            let d = self.dims(p);
            if d != (1, c) {
                return Err(DplError::dims("layer_norm", &[r, c], &[d.0, d.1]));
            }
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let inv_c = 1.0 / c as f64;
        for row in 0..r {
            let src = &xv[row * c..(row + 1) * c];
            let mean = src.iter().sum::<f64>() * inv_c;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[row] = rs;
            for j in 0..c {
                let xh = (src[j] - mean) * rs;
                xhat[row * c + j] = xh;
                out[row * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            r,
            c,
            Cow::Owned(out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * sigmoid(GELU_SLOPE * x)).collect();
        let rg = self.rg(a);
        self.push(r, c, Cow::Owned(out), rg, Op::QuickGelu(a))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let src = &v[row * c..(row + 1) * c];
            let n = dot(src, src).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(DplError::contract("cannot normalize a zero or non-finite row"));
            }
            norms.push(n);
            for j in 0..c {
                out[row * c + j] = src[j] / n;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(r, c, Cow::Owned(out), rg, Op::L2NormalizeRows { x: a, norms }))
    }

    /// `sum_i weights[i] * inputs[i]`, where `weights` is a `1 x n` node and
    /// the sum is accumulated in index order.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let (wr, wc) = self.dims(weights);
        if wr != 1 || wc != inputs.len() || inputs.is_empty() {
            return Err(DplError::dims("weighted_sum", &[1, inputs.len()], &[wr, wc]));
        }
        let (r, c) = self.dims(inputs[0]);
        for &p in inputs {
            if self.dims(p) != (r, c) {
                let (pr, pc) = self.dims(p);
                return Err(DplError::dims("weighted_sum", &[r, c], &[pr, pc]));
            }
        }
        let w = self.value(weights);
        let mut out = vec![0.0; r * c];
        for (i, &p) in inputs.iter().enumerate() {
            let wi = w[i];
            out.iter_mut().zip(self.value(p)).for_each(|(o, x)| *o += wi * x);
        }
        let rg = self.rg(weights) || inputs.iter().any(|&p| self.rg(p));
        Ok(self.push(
            r,
            c,
            Cow::Owned(out),
            rg,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, Cow::Owned(vec![s]), rg, Op::Sum(a))
    }

    /// Mean over rows of `-ln p[label]`, with probabilities floored at
    /// [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (b, classes) = self.dims(probs);
        if labels.len() != b {
            return Err(DplError::dims("cross_entropy", &[b, classes], &[labels.len()]));
        }
        if b == 0 {
            return Err(DplError::contract("cross_entropy on an empty batch"));
        }
        let p = self.value(probs);
        let mut total = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(DplError::Index {
                    what: "label",
                    index: y,
                    len: classes,
                });
            }
            total -= p[row * classes + y].max(PROB_FLOOR).ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![total / b as f64]),
            rg,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over rows of `sum_c teacher * ln(teacher / student)`, both floored
    /// at [`PROB_FLOOR`]. Only the student receives gradient.
    pub fn kl_divergence(&mut self, teacher: Var, student: Var) -> Result<Var> {
        let (b, _) = self.same_shape("kl_divergence", teacher, student)?;
        if b == 0 {
            return Err(DplError::contract("kl_divergence on an empty batch"));
        }
        let t = self.value(teacher);
        let s = self.value(student);
        let mut total = 0.0;
        for (tv, sv) in t.iter().zip(s) {
            if *tv > 0.0 {
                total += tv * (tv.max(PROB_FLOOR).ln() - sv.max(PROB_FLOOR).ln());
            }
        }
        let rg = self.rg(student);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![total / b as f64]),
            rg,
            Op::KlDivergence { teacher, student },
        ))
    }

    /// Reverse pass from a scalar loss with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(DplError::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        self.backward_with(&[(loss, &[1.0])])
    }

    /// Reverse pass seeded with explicit upstream gradients, used to chain a
    /// tape onto gradients computed elsewhere.
    pub fn backward_with(&self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for &(v, g) in seeds {
            let n = self.node(v);
            if g.len() != n.rows * n.cols {
                return Err(DplError::dims("backward seed", &[n.rows, n.cols], &[g.len()]));
            }
            add_into(&mut grads[v.0], g);
            start = start.max(v.0 + 1);
        }
        let mut visited = Vec::new();
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.rg(*a) {
                    let buf = slot(grads, *a, m * k);
                    gemm_nt(g, self.value(*b), buf, m, n, k);
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, k * n);
                    gemm_tn(self.value(*a), g, buf, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.rg(*a) {
                    let buf = slot(grads, *a, m * k);
                    gemm_nn(g, self.value(*b), buf, m, n, k);
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, n * k);
                    gemm_tn(g, self.value(*a), buf, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_slice(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    add_slice(slot(grads, *a, g.len()), g);
                }
                if self.rg(*row) {
                    let buf = slot(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        add_slice(buf, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let buf = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                let buf = slot(grads, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(b, g)| *b += g * f);
            }
            Op::ConcatRows(top, bottom) => {
                let split = self.dims(*top).0 * cols;
                if self.rg(*top) {
                    add_slice(slot(grads, *top, split), &g[..split]);
                }
                if self.rg(*bottom) {
                    add_slice(slot(grads, *bottom, g.len() - split), &g[split..]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    if self.rg(p) {
                        let buf = slot(grads, p, rows * c);
                        for r in 0..rows {
                            add_slice(
                                &mut buf[r * c..(r + 1) * c],
                                &g[r * cols + offset..r * cols + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (_, c) = self.dims(*a);
                let buf = slot(grads, *a, rows * c);
                for r in 0..rows {
                    add_slice(
                        &mut buf[r * c + start..r * c + start + cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::SelectRow(a, row) => {
                let (r, c) = self.dims(*a);
                let buf = slot(grads, *a, r * c);
                add_slice(&mut buf[row * c..(row + 1) * c], g);
            }
            Op::StackRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        add_slice(slot(grads, p, cols), &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let buf = slot(grads, *a, g.len());
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner = dot(yr, gr);
                    for j in 0..cols {
                        buf[r * cols + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let buf = slot(grads, *gain, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let buf = slot(grads, *bias, cols);
                    for chunk in g.chunks(cols) {
                        add_slice(buf, chunk);
                    }
                }
                if self.rg(*x) {
                    let inv_c = 1.0 / cols as f64;
                    let buf = slot(grads, *x, rows * cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            dxhat[j] = g[r * cols + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..cols {
                            buf[r * cols + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::QuickGelu(a) => {
                let x = self.value(*a);
                let buf = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(GELU_SLOPE * x[i]);
                    buf[i] += g[i] * (s + GELU_SLOPE * x[i] * s * (1.0 - s));
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let buf = slot(grads, *x, g.len());
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner = dot(yr, gr);
                    for j in 0..cols {
                        buf[r * cols + j] += (gr[j] - yr[j] * inner) / norms[r];
                    }
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).to_vec();
                if self.rg(*weights) {
                    let dw: Vec<f64> = inputs.iter().map(|&p| dot(g, self.value(p))).collect();
                    add_slice(slot(grads, *weights, dw.len()), &dw);
                }
                for (i, &p) in inputs.iter().enumerate() {
                    if self.rg(p) {
                        let buf = slot(grads, p, g.len());
                        buf.iter_mut().zip(g).for_each(|(b, g)| *b += w[i] * g);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let buf = slot(grads, *a, n);
                buf.iter_mut().for_each(|b| *b += g[0]);
            }
            Op::CrossEntropy { probs, labels } => {
                let (b, c) = self.dims(*probs);
                let p = self.value(*probs);
                let buf = slot(grads, *probs, b * c);
                let scale = g[0] / b as f64;
                for (row, &y) in labels.iter().enumerate() {
                    let pv = p[row * c + y];
                    if pv > PROB_FLOOR {
                        buf[row * c + y] -= scale / pv;
                    }
                }
            }
            Op::KlDivergence { teacher, student } => {
                let (b, _) = self.dims(*student);
                let t = self.value(*teacher);
                let s = self.value(*student);
                let buf = slot(grads, *student, s.len());
                let scale = g[0] / b as f64;
                for i in 0..s.len() {
                    if t[i] > 0.0 && s[i] > PROB_FLOOR {
                        buf[i] -= scale * t[i] / s[i];
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => add_slice(d, src),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
