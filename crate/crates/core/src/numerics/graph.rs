//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse and accumulates gradients into the trainable
//! [`Parameter`](super::Parameter)s that were pulled into the graph. Nodes
//! that do not depend on a trainable parameter or a variable are never
//! differentiated.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::param::{ParamId, ParamStore};
use crate::numerics::tensor::{axpy, dot, matmul_nn, matmul_nt, matmul_tn_acc, row_nll, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxRows(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Slice {
        src: NodeId,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectCol(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    GatedLowRank {
        x: NodeId,
        gates: NodeId,
        a: Vec<NodeId>,
        b: Vec<NodeId>,
        scale: f32,
        u: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape().len() {
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::shape(op, t.shape(), &[])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the tape so it can be reused for a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; never differentiated.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained and readable through [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Pulls a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    /// `a [m×k] · b [k×n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul")?;
        let (k2, n) = dims2(bv, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a [m×k] · b [n×k]ᵀ`, the layout of `x · Wᵀ` for a `[out×in]` weight.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul_nt")?;
        let (n, k2) = dims2(bv, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape("mul", bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`n` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = dims2(av, "add_row")?;
        if rv.shape() != [n] {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut data = av.data().to_vec();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *d += r;
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = dims2(xv, "layer_norm")?;
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = dims2(av, "softmax_rows")?;
        let mut data = av.data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (v, d) = dims2(tv, "gather")?;
        if ids.is_empty() {
            return Err(Error::Empty("gather ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    len: v,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rectangular block `rows × cols` starting at `(row0, col0)`.
    pub fn slice(&mut self, src: NodeId, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<NodeId> {
        let sv = self.value(src);
        let (m, n) = dims2(sv, "slice")?;
        if rows == 0 || cols == 0 || row0 + rows > m || col0 + cols > n {
            return Err(Error::shape("slice", sv.shape(), &[row0 + rows, col0 + cols]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            data.extend_from_slice(&sv.row(i)[col0..col0 + cols]);
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::Slice { src, row0, col0 }, &[src]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat_cols".into()))?;
        let m = dims2(self.value(*first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut c0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..m {
                data[i * n + c0..i * n + c0 + w].copy_from_slice(pv.row(i));
            }
            c0 += w;
        }
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat_rows".into()))?;
        let n = dims2(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column `j` of an `[m×n]` matrix as `[m×1]`.
    pub fn select_col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = dims2(av, "select_col")?;
        if j >= n {
            return Err(Error::Index {
                op: "select_col",
                index: j,
                len: n,
            });
        }
        let data = (0..m).map(|i| av.at(i, j)).collect();
        let value = Tensor::new(&[m, 1], data)?;
        Ok(self.push(value, Op::SelectCol(a, j), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.numel() as f32);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Mean token cross-entropy of `logits [N×C]` against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (m, c) = dims2(lv, "cross_entropy")?;
        if m != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut total = 0.0f64;
        let mut probs = lv.data().to_vec();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            total += row_nll(lv.row(i), t) as f64;
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let value = Tensor::scalar((total / m as f64) as f32);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Gated low-rank update, one row per token:
    /// `out[t] = scale · (Σᵢ g[t,i]·Bᵢ) · (Σᵢ g[t,i]·Aᵢ) · x[t]`.
    ///
    /// `x [T×k]`, `gates [T×n]`, `a[i] [r×k]`, `b[i] [d×r]`. The gated factors
    /// are summed before the two products, so the cost per token is linear in
    /// the number of experts.
    pub fn gated_low_rank(&mut self, x: NodeId, gates: NodeId, a: &[NodeId], b: &[NodeId], scale: f32) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gates));
        let (t, k) = dims2(xv, "gated_low_rank")?;
        let (tg, n) = dims2(gv, "gated_low_rank")?;
        if tg != t || a.len() != n || b.len() != n {
            return Err(Error::shape("gated_low_rank", xv.shape(), gv.shape()));
        }
        let (r, ka) = dims2(self.value(a[0]), "gated_low_rank")?;
        let (d, rb) = dims2(self.value(b[0]), "gated_low_rank")?;
        if ka != k || rb != r {
            return Err(Error::shape("gated_low_rank", self.value(a[0]).shape(), self.value(b[0]).shape()));
        }
        for i in 0..n {
            if self.value(a[i]).shape() != [r, k] || self.value(b[i]).shape() != [d, r] {
                return Err(Error::shape("gated_low_rank", self.value(a[i]).shape(), self.value(b[i]).shape()));
            }
        }
        let mut u = vec![0.0; t * r];
        let mut out = vec![0.0; t * d];
        let mut mixed_a = vec![0.0; r * k];
        let mut mixed_b = vec![0.0; d * r];
        for tok in 0..t {
            let g = gv.row(tok);
            self.mix(a, g, &mut mixed_a);
            self.mix(b, g, &mut mixed_b);
            let ut = &mut u[tok * r..(tok + 1) * r];
            matmul_nt(&mixed_a, xv.row(tok), ut, r, k, 1);
            let ot = &mut out[tok * d..(tok + 1) * d];
            matmul_nt(&mixed_b, ut, ot, d, r, 1);
            ot.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(&[t, d], out)?;
        let mut inputs = vec![x, gates];
        inputs.extend_from_slice(a);
        inputs.extend_from_slice(b);
        Ok(self.push(
            value,
            Op::GatedLowRank {
                x,
                gates,
                a: a.to_vec(),
                b: b.to_vec(),
                scale,
                u,
            },
            &inputs,
        ))
    }

    fn mix(&self, mats: &[NodeId], gates: &[f32], out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (m, &g) in mats.iter().zip(gates) {
            axpy(g, self.value(*m).data(), out);
        }
    }

    /// Accumulates d(loss)/d(param) into every trainable parameter reachable
    /// from `loss`. The tape can be differentiated once; call
    /// [`Graph::reset`] before reusing it.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads, store)?;
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Lazily allocated accumulator for an input's gradient.
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let g = grads[id.0].get_or_insert_with(|| Tensor::zeros(nodes[id.0].value.shape()));
            f(g.data_mut());
        };
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                if p.trainable {
                    p.grad.add_assign(dy)?;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].value, "matmul")?;
                let n = nodes[b.0].value.shape()[1];
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |g| {
                    let mut tmp = vec![0.0; m * k];
                    matmul_nt(dyd, bv, &mut tmp, m, n, k);
                    axpy(1.0, &tmp, g);
                });
                let av = nodes[a.0].value.data();
                acc(*b, &mut |g| matmul_tn_acc(av, dyd, g, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(&nodes[a.0].value, "matmul_nt")?;
                let n = nodes[b.0].value.shape()[0];
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |g| {
                    let mut tmp = vec![0.0; m * k];
                    matmul_nn(dyd, bv, &mut tmp, m, n, k);
                    axpy(1.0, &tmp, g);
                });
                let av = nodes[a.0].value.data();
                acc(*b, &mut |g| matmul_tn_acc(dyd, av, g, m, n, k));
            }
            Op::Transpose(a) => {
                let t = dy.transpose()?;
                acc(*a, &mut |g| axpy(1.0, t.data(), g));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| axpy(1.0, dyd, g));
                acc(*b, &mut |g| axpy(1.0, dyd, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| axpy(1.0, dyd, g));
                acc(*b, &mut |g| axpy(-1.0, dyd, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |g| axpy(*s, dyd, g)),
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| axpy(1.0, dyd, g));
                let n = nodes[row.0].value.numel();
                acc(*row, &mut |g| {
                    for chunk in dyd.chunks(n) {
                        axpy(1.0, chunk, g);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = nodes[gamma.0].value.numel();
                let gv = nodes[gamma.0].value.data();
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; n];
                    for (i, r) in rstd.iter().enumerate() {
                        let dyr = &dyd[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = dyr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f32>() / n as f32;
                        let mean_dx = dot(&dxhat, xh) / n as f32;
                        for j in 0..n {
                            g[i * n + j] += r * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (dyr, xh) in dyd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dyr[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for dyr in dyd.chunks(n) {
                        axpy(1.0, dyr, g);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*a, &mut |g| {
                    for (i, (yr, dr)) in y.chunks(n).zip(dyd.chunks(n)).enumerate() {
                        let s = dot(yr, dr);
                        for j in 0..n {
                            g[i * n + j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(1.0, &dyd[i * d..(i + 1) * d], &mut g[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Slice { src, row0, col0 } => {
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let n = nodes[src.0].value.cols();
                acc(*src, &mut |g| {
                    for i in 0..rows {
                        let base = (row0 + i) * n + col0;
                        axpy(1.0, &dyd[i * cols..(i + 1) * cols], &mut g[base..base + cols]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut c0 = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |g| {
                        for i in 0..m {
                            axpy(1.0, &dyd[i * n + c0..i * n + c0 + w], &mut g[i * w..(i + 1) * w]);
                        }
                    });
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |g| axpy(1.0, &dyd[off..off + len], g));
                    off += len;
                }
            }
            Op::SelectCol(a, j) => {
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |g| {
                    for (i, d) in dyd.iter().enumerate() {
                        g[i * n + j] += d;
                    }
                });
            }
            Op::Sum(a) => {
                let d = dyd[0];
                acc(*a, &mut |g| g.iter_mut().for_each(|v| *v += d));
            }
            Op::Mean(a) => {
                let d = dyd[0] / nodes[a.0].value.numel() as f32;
                acc(*a, &mut |g| g.iter_mut().for_each(|v| *v += d));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].value.cols();
                let s = dyd[0] / targets.len() as f32;
                acc(*logits, &mut |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &probs[i * c..(i + 1) * c];
                        let gr = &mut g[i * c..(i + 1) * c];
                        axpy(s, row, gr);
                        gr[t] -= s;
                    }
                });
            }
            Op::GatedLowRank { x, gates, a, b, scale, u } => {
                self.backprop_gated(dyd, *x, *gates, a, b, *scale, u, grads)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_gated(
        &self,
        dy: &[f32],
        x: NodeId,
        gates: NodeId,
        a: &[NodeId],
        b: &[NodeId],
        scale: f32,
        u: &[f32],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let xv = &nodes[x.0].value;
        let gv = &nodes[gates.0].value;
        let (t, k) = dims2(xv, "gated_low_rank")?;
        let n = gv.cols();
        let (r, d) = (nodes[a[0].0].value.shape()[0], nodes[b[0].0].value.shape()[0]);

        let want = |id: NodeId| nodes[id.0].requires_grad;
        let mut dx = want(x).then(|| vec![0.0; t * k]);
        let mut dg = want(gates).then(|| vec![0.0; t * n]);
        let mut da: Vec<Option<Vec<f32>>> = a.iter().map(|&i| want(i).then(|| vec![0.0; r * k])).collect();
        let mut db: Vec<Option<Vec<f32>>> = b.iter().map(|&i| want(i).then(|| vec![0.0; d * r])).collect();

        let mut mixed_a = vec![0.0; r * k];
        let mut mixed_b = vec![0.0; d * r];
        let mut du = vec![0.0; r];
        let mut dmb = vec![0.0; d * r];
        let mut ax = vec![0.0; r];
        for tok in 0..t {
            let g = gv.row(tok);
            let xt = xv.row(tok);
            let ut = &u[tok * r..(tok + 1) * r];
            let dyt = &dy[tok * d..(tok + 1) * d];
            self.mix(a, g, &mut mixed_a);
            self.mix(b, g, &mut mixed_b);
            // dB̃ = s·dy uᵀ ; du = s·B̃ᵀ dy
            for i in 0..d {
                for j in 0..r {
                    dmb[i * r + j] = scale * dyt[i] * ut[j];
                }
            }
            du.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                axpy(scale * dyt[i], &mixed_b[i * r..(i + 1) * r], &mut du);
            }
            if let Some(dx) = dx.as_mut() {
                let dxt = &mut dx[tok * k..(tok + 1) * k];
                for j in 0..r {
                    axpy(du[j], &mixed_a[j * k..(j + 1) * k], dxt);
                }
            }
            for e in 0..n {
                if let Some(dae) = da[e].as_mut() {
                    for j in 0..r {
                        axpy(g[e] * du[j], xt, &mut dae[j * k..(j + 1) * k]);
                    }
                }
                if let Some(dbe) = db[e].as_mut() {
                    axpy(g[e], &dmb, dbe);
                }
                if let Some(dg) = dg.as_mut() {
                    // <dÃ, Aₑ> = duᵀ (Aₑ x) ; <dB̃, Bₑ>
                    let ae = nodes[a[e].0].value.data();
                    matmul_nt(ae, xt, &mut ax, r, k, 1);
                    dg[tok * n + e] += dot(&du, &ax) + dot(&dmb, nodes[b[e].0].value.data());
                }
            }
        }

        let mut add = |id: NodeId, buf: Vec<f32>| {
            let g = grads[id.0].get_or_insert_with(|| Tensor::zeros(nodes[id.0].value.shape()));
            axpy(1.0, &buf, g.data_mut());
        };
        if let Some(buf) = dx {
            add(x, buf);
        }
        if let Some(buf) = dg {
            add(gates, buf);
        }
        for (id, buf) in a.iter().zip(da) {
            if let Some(buf) = buf {
                add(*id, buf);
            }
        }
        for (id, buf) in b.iter().zip(db) {
            if let Some(buf) = buf {
                add(*id, buf);
            }
        }
        Ok(())
    }
}
