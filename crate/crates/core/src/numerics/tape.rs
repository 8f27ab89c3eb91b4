use std::cell::{Cell, Ref, RefCell};
use std::ops::Range;
use std::sync::Arc;

use super::{counter, gelu_grad_scalar, gelu_scalar, softmax_in_place, Tensor};
use crate::error::{invalid, Error, Result};

/// Records primitive applications for one forward pass.
///
/// Node ids are assigned in creation order, which is already a topological
/// order, so the backward sweep simply walks the ids downwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    AddBias { a: usize, bias: usize },
    Gelu { a: usize },
    Softmax { a: usize },
    LayerNorm(Box<LayerNormSaved>),
    Slice { a: usize, rows: Range<usize>, cols: Range<usize> },
    SelectRows { a: usize, index: Vec<usize> },
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    BinaryCrossEntropy { logits: usize, targets: Vec<f64> },
    Sum { a: usize },
}

struct LayerNormSaved {
    x: usize,
    gamma: usize,
    beta: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    layout: AttentionLayout,
    probs: Vec<f64>,
}

/// How a stacked `[segments * segment_len, width]` activation splits into
/// independent sequences for self-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    /// Rows per sequence segment (the padded length).
    pub segment_len: usize,
    /// Number of leading non-padding positions in each segment. Keys beyond
    /// this are masked with an additive `-1e9`.
    pub valid_lens: Vec<usize>,
    /// Width of a single head; the number of heads is `width / head_dim`.
    pub head_dim: usize,
}

const MASK_VALUE: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    /// Leaf sharing an existing buffer, e.g. a model parameter.
    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires one. A tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(invalid("loss belongs to a different tape"));
        }
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = loss.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        self.consumed.set(true);
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        nodes[loss.id].grad = Some(Tensor::full(&loss_shape, 1.0));
        for id in (0..=loss.id).rev() {
            let Some(grad) = nodes[id].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut nodes[id].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                nodes[id].grad = Some(grad);
                continue;
            }
            let out = Arc::clone(&nodes[id].value);
            backprop(&mut nodes, op, &grad, &out);
        }
        Ok(())
    }
}

fn value_of(nodes: &[Node], id: usize) -> Arc<Tensor> {
    Arc::clone(&nodes[id].value)
}

/// Adds into the gradient buffer of `id`, allocating it on first use.
fn with_grad(nodes: &mut [Node], id: usize, f: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[id];
    if !node.requires_grad {
        return;
    }
    let shape = node.value.shape().to_vec();
    let g = node.grad.get_or_insert_with(|| Tensor::zeros(&shape));
    f(g.data_mut());
}

fn backprop(nodes: &mut [Node], op: Op, grad: &Tensor, out: &Tensor) {
    let g = grad.data();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let av = value_of(nodes, a);
            let bv = value_of(nodes, b);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            // dA = dC * B^T
            with_grad(nodes, a, |da| {
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), 1.0, da, (k, 1));
            });
            // dB = A^T * dC
            with_grad(nodes, b, |db| {
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), 1.0, db, (n, 1));
            });
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                with_grad(nodes, id, |d| add_into(d, g));
            }
        }
        Op::Mul { a, b } => {
            let av = value_of(nodes, a);
            let bv = value_of(nodes, b);
            with_grad(nodes, a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * y;
                }
            });
            with_grad(nodes, b, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * x;
                }
            });
        }
        Op::Scale { a, factor } => {
            with_grad(nodes, a, |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += factor * g;
                }
            });
        }
        Op::AddBias { a, bias } => {
            with_grad(nodes, a, |d| add_into(d, g));
            let cols = grad.cols();
            with_grad(nodes, bias, |d| {
                for row in g.chunks_exact(cols) {
                    add_into(d, row);
                }
            });
        }
        Op::Gelu { a } => {
            let av = value_of(nodes, a);
            with_grad(nodes, a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * gelu_grad_scalar(*x);
                }
            });
        }
        Op::Softmax { a } => {
            let cols = out.cols();
            with_grad(nodes, a, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(out.data().chunks_exact(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            });
        }
        Op::LayerNorm(saved) => {
            let LayerNormSaved {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } = *saved;
            let gv = value_of(nodes, gamma);
            let cols = gv.len();
            with_grad(nodes, gamma, |d| {
                for (grow, nrow) in g.chunks_exact(cols).zip(normalized.chunks_exact(cols)) {
                    for ((d, g), n) in d.iter_mut().zip(grow).zip(nrow) {
                        *d += g * n;
                    }
                }
            });
            with_grad(nodes, beta, |d| {
                for grow in g.chunks_exact(cols) {
                    add_into(d, grow);
                }
            });
            with_grad(nodes, x, |d| {
                let mut dn = vec![0.0; cols];
                for (r, (drow, grow)) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .enumerate()
                {
                    let nrow = &normalized[r * cols..(r + 1) * cols];
                    for ((dn, g), gamma) in dn.iter_mut().zip(grow).zip(gv.data()) {
                        *dn = g * gamma;
                    }
                    let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                    let mean_dn_n =
                        dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((d, dn), n) in drow.iter_mut().zip(&dn).zip(nrow) {
                        *d += inv_std[r] * (dn - mean_dn - n * mean_dn_n);
                    }
                }
            });
        }
        Op::Slice { a, rows, cols } => {
            let src_cols = nodes[a].value.cols();
            let width = cols.len();
            with_grad(nodes, a, |d| {
                for (i, r) in rows.clone().enumerate() {
                    let dst = &mut d[r * src_cols + cols.start..r * src_cols + cols.end];
                    add_into(dst, &g[i * width..(i + 1) * width]);
                }
            });
        }
        Op::SelectRows { a, index } => {
            let cols = grad.cols();
            with_grad(nodes, a, |d| {
                for (i, &r) in index.iter().enumerate() {
                    add_into(&mut d[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
            });
        }
        Op::Attention(saved) => attention_backward(nodes, *saved, g),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let seed = g[0];
            let classes = probs.len() / labels.len();
            let scale = seed / labels.len() as f64;
            with_grad(nodes, logits, |d| {
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        d[i * classes + c] += scale * (probs[i * classes + c] - target);
                    }
                }
            });
        }
        Op::BinaryCrossEntropy { logits, targets } => {
            let zv = value_of(nodes, logits);
            let scale = g[0] / targets.len() as f64;
            with_grad(nodes, logits, |d| {
                for ((d, z), t) in d.iter_mut().zip(zv.data()).zip(&targets) {
                    *d += scale * (sigmoid(*z) - t);
                }
            });
        }
        Op::Sum { a } => {
            let seed = g[0];
            with_grad(nodes, a, |d| {
                for d in d.iter_mut() {
                    *d += seed;
                }
            });
        }
    }
}

fn attention_backward(nodes: &mut [Node], saved: AttentionSaved, g: &[f64]) {
    let AttentionSaved {
        q,
        k,
        v,
        layout,
        probs,
    } = saved;
    let qv = value_of(nodes, q);
    let kv = value_of(nodes, k);
    let vv = value_of(nodes, v);
    let width = qv.cols();
    let dh = layout.head_dim;
    let heads = width / dh;
    let l = layout.segment_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = qv.len();
    let mut dq = vec![0.0; n];
    let mut dk = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut dp = vec![0.0; l * l];
    for s in 0..layout.valid_lens.len() {
        let base = s * l * width;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
            // dV = P^T dO
            gemm(l, l, dh, p, (1, l), &g[off..], (width, 1), 1.0, &mut dv[off..], (width, 1));
            // dP = dO V^T
            gemm(l, dh, l, &g[off..], (width, 1), &vv.data()[off..], (1, width), 0.0, &mut dp, (l, 1));
            // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale
            for (prow, dprow) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (d, p) in dprow.iter_mut().zip(prow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(l, l, dh, &dp, (l, 1), &kv.data()[off..], (width, 1), 1.0, &mut dq[off..], (width, 1));
            gemm(l, l, dh, &dp, (1, l), &qv.data()[off..], (width, 1), 1.0, &mut dk[off..], (width, 1));
        }
    }
    with_grad(nodes, q, |d| add_into(d, &dq));
    with_grad(nodes, k, |d| add_into(d, &dk));
    with_grad(nodes, v, |d| add_into(d, &dv));
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product, with explicit
/// (row, column) strides for every operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols - 1) * cs + 1
    };
    if k > 0 {
        assert!(a.len() >= extent(m, k, a_strides));
        assert!(b.len() >= extent(k, n, b_strides));
    }
    assert!(c.len() >= extent(m, n, c_strides));
    // SAFETY: every index touched by the kernel lies within the extents
    // asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

fn binary_check(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.tape.node(self.id).value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.node(self.id).grad.clone()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid("operands recorded on different tapes"))
        }
    }

    fn emit(&self, value: Tensor, inputs: &[&Var<'_>], op: Op) -> Var<'t> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        self.tape.push(Arc::new(value), rg, op)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
        counter::add_matmul((m * k * n) as u64);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.emit(value, &[self, other], Op::MatMul { a: self.id, b: other.id }))
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        binary_check(&a, &b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.emit(value, &[self, other], Op::Add { a: self.id, b: other.id }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        binary_check(&a, &b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.emit(value, &[self, other], Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.emit(value, &[self], Op::Scale { a: self.id, factor })
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&self, bias: &Var<'_>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let a = self.value();
        let b = bias.value();
        if b.shape().len() != 1 || a.cols() != b.len() || a.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(b.len()) {
            add_into(row, b.data());
        }
        counter::add_bias(a.len() as u64);
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.emit(value, &[self, bias], Op::AddBias { a: self.id, bias: bias.id }))
    }

    /// Exact-erf GeLU.
    pub fn gelu(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.emit(value, &[self], Op::Gelu { a: self.id })
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().is_empty() {
            return Err(invalid("softmax of a scalar"));
        }
        let mut value = (*a).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.emit(value, &[self], Op::Softmax { a: self.id }))
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: &Var<'_>, beta: &Var<'_>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let d = x.cols();
        if x.shape().is_empty() || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let n = (row[c] - mean) * is;
                normalized[r * d + c] = n;
                out[r * d + c] = n * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let saved = LayerNormSaved {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            normalized,
            inv_std,
        };
        Ok(self.emit(value, &[self, gamma, beta], Op::LayerNorm(Box::new(saved))))
    }

    /// Contiguous block of a matrix.
    pub fn slice(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Var<'t>> {
        let a = self.value();
        a.require_rank(2, "slice")?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(invalid(format!(
                "slice {rows:?} x {cols:?} out of bounds for {:?}",
                a.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&a.data()[i * c + cols.start..i * c + cols.end]);
        }
        let value = Tensor::new(vec![rows.len(), cols.len()], data)?;
        Ok(self.emit(value, &[self], Op::Slice { a: self.id, rows, cols }))
    }

    /// Leading `n` entries of a vector.
    pub fn prefix(&self, n: usize) -> Result<Var<'t>> {
        let a = self.value();
        a.require_rank(1, "prefix")?;
        if n > a.len() {
            return Err(invalid(format!("prefix {n} of vector of length {}", a.len())));
        }
        let value = Tensor::vector(a.data()[..n].to_vec());
        // A vector is sliced as a single-row matrix.
        Ok(self.emit(
            value,
            &[self],
            Op::Slice {
                a: self.id,
                rows: 0..1,
                cols: 0..n,
            },
        ))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        a.require_rank(2, "select_rows")?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        if let Some(bad) = index.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(a.row(i));
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.emit(
            value,
            &[self],
            Op::SelectRows {
                a: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over stacked segments.
    ///
    /// `self` holds the queries; all three inputs are `[N, width]` with head
    /// `h` occupying columns `h * head_dim .. (h + 1) * head_dim`.
    pub fn attention(
        &self,
        keys: &Var<'_>,
        values: &Var<'_>,
        layout: &AttentionLayout,
    ) -> Result<Var<'t>> {
        self.same_tape(keys)?;
        self.same_tape(values)?;
        let q = self.value();
        let k = keys.value();
        let v = values.value();
        binary_check(&q, &k, "attention")?;
        binary_check(&q, &v, "attention")?;
        q.require_rank(2, "attention")?;
        let width = q.cols();
        let l = layout.segment_len;
        let dh = layout.head_dim;
        if dh == 0 || !width.is_multiple_of(dh) {
            return Err(invalid(format!("width {width} not divisible by head dim {dh}")));
        }
        if l * layout.valid_lens.len() != q.rows() {
            return Err(invalid(format!(
                "{} rows do not split into {} segments of {l}",
                q.rows(),
                layout.valid_lens.len()
            )));
        }
        if layout.valid_lens.iter().any(|&n| n == 0 || n > l) {
            return Err(invalid("segment valid length must be in 1..=segment_len"));
        }
        let heads = width / dh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; layout.valid_lens.len() * heads * l * l];
        let mut out = vec![0.0; q.len()];
        for (s, &valid) in layout.valid_lens.iter().enumerate() {
            let base = s * l * width;
            for h in 0..heads {
                let off = base + h * dh;
                let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                gemm(l, dh, l, &q.data()[off..], (width, 1), &k.data()[off..], (1, width), 0.0, p, (l, 1));
                for row in p.chunks_exact_mut(l) {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x *= scale;
                        if j >= valid {
                            *x += MASK_VALUE;
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(l, l, dh, p, (l, 1), &v.data()[off..], (width, 1), 0.0, &mut out[off..], (width, 1));
            }
        }
        counter::add_attention((2 * layout.valid_lens.len() * heads * l * l * dh) as u64);
        let value = Tensor::new(q.shape().to_vec(), out)?;
        let saved = AttentionSaved {
            q: self.id,
            k: keys.id,
            v: values.id,
            layout: layout.clone(),
            probs,
        };
        Ok(self.emit(value, &[self, keys, values], Op::Attention(Box::new(saved))))
    }

    /// Mean negative log-softmax of the labelled class over rows of
    /// `[batch, classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let z = self.value();
        z.require_rank(2, "cross_entropy")?;
        let (b, c) = (z.shape()[0], z.shape()[1]);
        if labels.len() != b || b == 0 {
            return Err(invalid(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = z.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let zr = z.row(i);
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - zr[labels[i]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.emit(
            value,
            &[self],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean sigmoid binary cross-entropy against 0/1 targets of the same
    /// shape, in the fused `max(z, 0) - z t + ln(1 + e^-|z|)` form.
    pub fn binary_cross_entropy(&self, targets: &Tensor) -> Result<Var<'t>> {
        let z = self.value();
        binary_check(&z, targets, "binary_cross_entropy")?;
        if z.is_empty() {
            return Err(invalid("binary_cross_entropy of an empty tensor"));
        }
        if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(invalid(format!("binary target must be 0 or 1, got {bad}")));
        }
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        Ok(self.emit(
            Tensor::scalar(loss),
            &[self],
            Op::BinaryCrossEntropy {
                logits: self.id,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Sum of all entries.
    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let value = Tensor::scalar(a.data().iter().sum());
        self.emit(value, &[self], Op::Sum { a: self.id })
    }
}
