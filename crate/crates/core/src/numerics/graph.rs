//! Reverse-mode tape.
//!
//! Operations append nodes to a [`Graph`]; each node stores its output value
//! and the ids of its inputs. [`Graph::backward`] seeds a one-element loss
//! node with gradient 1 and walks the tape in reverse, accumulating into a
//! per-node buffer. Shape violations are programmer errors and panic at node
//! construction; nothing on the tape can fail at runtime.

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// Index of a node on the tape. Valid only for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<F: Real> {
    /// Constant input; gradients never flow into it.
    Leaf,
    /// Differentiable input that is not a parameter. Used by gradient checks.
    Var,
    /// The payload records which parameter the node binds; gradient
    /// collection goes through the graph's parameter list instead.
    Param(#[allow(dead_code)] ParamId),
    /// Forwards its input's value and blocks the gradient. The payload is
    /// provenance for debugging.
    StopGrad(#[allow(dead_code)] NodeId),
    Add(NodeId, NodeId),
    /// Adds a rank-1 row vector to every row of a rank-2 tensor.
    AddRow { mat: NodeId, row: NodeId },
    Scale { x: NodeId, c: F },
    Mul(NodeId, NodeId),
    /// `a @ b`; `a` may be rank-1 (treated as a single row, result rank-1).
    MatMul(NodeId, NodeId),
    /// `a @ b^T` without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row-wise softmax; a rank-1 input is one row.
    Softmax(NodeId),
    /// Row-wise layer normalization with learned gain and bias.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Column-wise mean over rows: (m, n) -> (n).
    MeanRows(NodeId),
    ConcatVec(NodeId, NodeId),
    /// Stacks parts along axis 0; a rank-1 part contributes one row.
    ConcatRows(Vec<NodeId>),
    /// Joins rank-2 parts along axis 1.
    ConcatCols(Vec<NodeId>),
    /// Contiguous range along axis 0: elements of a vector, rows of a matrix.
    Slice0 { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    /// Picks one row of an embedding table.
    EmbedRow { table: NodeId, row: usize },
    /// Cross-entropy of a logit vector against one target index.
    CrossEntropy { logits: NodeId, target: usize },
    /// Summed binary cross-entropy of a logit vector against 0/1 targets.
    SigmoidBce { logits: NodeId, targets: Vec<F> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`NodeId`].
pub struct Grads<F: Real> {
    by_node: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient buffer of a node, if anything flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.by_node[id.0].as_deref()
    }
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    /// Parameter bindings made through [`Graph::param`], in creation order.
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input. No gradient is ever accumulated for it.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable non-parameter input; gradient checks perturb these.
    pub fn var(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Var, true)
    }

    /// Binds a parameter onto the tape. Bind each parameter at most once per
    /// graph so its gradient accumulates in one buffer; [`super::ParamBinder`]
    /// enforces that.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        let entry = store.value(id).clone();
        let trainable = store.is_trainable(id);
        let node = self.push(entry, Op::Param(id), trainable);
        self.param_nodes.push((id, node));
        node
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad(x), false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add: shape {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let (tm, tr) = (self.value(mat), self.value(row));
        assert_eq!(tm.rank(), 2, "add_row: mat must be rank 2");
        assert_eq!(tr.rank(), 1, "add_row: row must be rank 1");
        assert_eq!(
            tm.n_cols(),
            tr.n_cols(),
            "add_row: {} cols vs row length {}",
            tm.n_cols(),
            tr.n_cols()
        );
        let cols = tm.n_cols();
        let mut data = tm.data().to_vec();
        for r in 0..tm.n_rows() {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] + tr.data()[c];
            }
        }
        let value = Tensor::from_vec(tm.shape().to_vec(), data);
        let needs = self.needs(mat) || self.needs(row);
        self.push(value, Op::AddRow { mat, row }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "mul: shape {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rank(), 2, "matmul: rhs must be rank 2");
        let (m, k) = (ta.n_rows(), ta.n_cols());
        let (kb, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, kb, "matmul: inner dims {} vs {}", k, kb);
        let mut out = vec![F::zero(); m * n];
        mm_acc(ta.data(), m, k, tb.data(), n, &mut out);
        let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::from_vec(shape, out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rank(), 2, "matmul_nt: rhs must be rank 2");
        let (m, k) = (ta.n_rows(), ta.n_cols());
        let (n, kb) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, kb, "matmul_nt: inner dims {} vs {}", k, kb);
        let mut out = vec![F::zero(); m * n];
        mm_nt_acc(ta.data(), m, k, tb.data(), n, &mut out);
        let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::from_vec(shape, out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT(a, b), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid_stable(v)).collect();
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (rows, cols) = (t.n_rows(), t.n_cols());
        assert!(cols > 0, "softmax: empty rows");
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().cloned().fold(row[0], F::max);
            let mut sum = F::zero();
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum = sum + e;
            }
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] / sum;
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(value, Op::Softmax(x), needs)
    }

    /// Row-wise layer normalization: `gain * (x - mean) / sqrt(var + eps) + bias`
    /// with biased variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let cols = tx.n_cols();
        assert_eq!(tg.shape(), &[cols], "layer_norm: gain shape");
        assert_eq!(tb.shape(), &[cols], "layer_norm: bias shape");
        let rows = tx.n_rows();
        let eps = F::from_f64(LAYER_NORM_EPS);
        let nf = F::from_f64(cols as f64);
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let inv = (var + eps).sqrt().recip();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv;
                data[r * cols + c] = tg.data()[c] * xhat + tb.data()[c];
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias }, needs)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.rank(), 2, "mean_rows: input must be rank 2");
        let (rows, cols) = (t.n_rows(), t.n_cols());
        assert!(rows > 0, "mean_rows: no rows");
        let rf = F::from_f64(rows as f64);
        let mut data = vec![F::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] = data[c] + t.at2(r, c);
            }
        }
        for v in data.iter_mut() {
            *v = *v / rf;
        }
        let value = Tensor::vector(data);
        let needs = self.needs(x);
        self.push(value, Op::MeanRows(x), needs)
    }

    pub fn concat_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 1, "concat_vec: lhs must be rank 1");
        assert_eq!(tb.rank(), 1, "concat_vec: rhs must be rank 1");
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::vector(data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatVec(a, b), needs)
    }

    /// Stacks parts along axis 0. Rank-1 parts count as one row each; all
    /// parts must share the same column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.value(parts[0]).n_cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(
                t.n_cols(),
                cols,
                "concat_rows: column mismatch {} vs {}",
                t.n_cols(),
                cols
            );
            rows += t.n_rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.value(parts[0]).n_rows();
        let total: usize = parts.iter().map(|&p| self.value(p).n_cols()).sum();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rank(), 2, "concat_cols: parts must be rank 2");
            assert_eq!(
                t.n_rows(),
                rows,
                "concat_cols: row mismatch {} vs {}",
                t.n_rows(),
                rows
            );
        }
        let mut data = vec![F::zero(); rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.n_cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let value = Tensor::matrix(rows, total, data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Contiguous slice along axis 0: elements of a rank-1 tensor, rows of a
    /// rank-2 tensor. The result keeps the input's rank.
    pub fn slice0(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(x);
        assert!(len > 0, "slice0: empty slice");
        assert!(
            start + len <= t.shape()[0],
            "slice0: {}..{} out of {} entries",
            start,
            start + len,
            t.shape()[0]
        );
        let (value, op) = match t.rank() {
            1 => (
                Tensor::vector(t.data()[start..start + len].to_vec()),
                Op::Slice0 { x, start, len },
            ),
            _ => {
                let cols = t.n_cols();
                (
                    Tensor::matrix(len, cols, t.data()[start * cols..(start + len) * cols].to_vec()),
                    Op::Slice0 { x, start, len },
                )
            }
        };
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            t.numel(),
            "reshape: {:?} incompatible with {} entries",
            shape,
            t.numel()
        );
        let value = Tensor::from_vec(shape, t.data().to_vec());
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    pub fn embed_row(&mut self, table: NodeId, row: usize) -> NodeId {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "embed_row: table must be rank 2");
        assert!(
            row < t.n_rows(),
            "embed_row: row {} out of {}",
            row,
            t.n_rows()
        );
        let value = Tensor::vector(t.row(row).to_vec());
        let needs = self.needs(table);
        self.push(value, Op::EmbedRow { table, row }, needs)
    }

    /// `logsumexp(logits) - logits[target]`, a one-element tensor.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let t = self.value(logits);
        assert_eq!(t.rank(), 1, "cross_entropy: logits must be rank 1");
        assert!(
            target < t.numel(),
            "cross_entropy: target {} out of {}",
            target,
            t.numel()
        );
        let row = t.data();
        let max = row.iter().cloned().fold(row[0], F::max);
        let mut sum = F::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        let loss = sum.ln() + max - row[target];
        let needs = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, needs)
    }

    /// Summed binary cross-entropy with logits, in the overflow-safe form
    /// `max(x, 0) - x z + ln(1 + exp(-|x|))` per class.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: &[F]) -> NodeId {
        let t = self.value(logits);
        assert_eq!(t.rank(), 1, "sigmoid_bce: logits must be rank 1");
        assert_eq!(
            t.numel(),
            targets.len(),
            "sigmoid_bce: {} logits vs {} targets",
            t.numel(),
            targets.len()
        );
        debug_assert!(
            targets
                .iter()
                .all(|&z| z == F::zero() || z == F::one()),
            "sigmoid_bce: targets must be 0 or 1"
        );
        let mut loss = F::zero();
        for (&x, &z) in t.data().iter().zip(targets) {
            let pos = if x > F::zero() { x } else { F::zero() };
            loss = loss + pos - x * z + (F::one() + (-x.abs()).exp()).ln();
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Reverse sweep from a one-element loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward: loss must have exactly one entry"
        );
        let mut by_node: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        by_node[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if by_node[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = by_node[i].take().unwrap();
            self.propagate(i, &g, &mut by_node);
            by_node[i] = Some(g);
        }
        Grads { by_node }
    }

    /// Gradients of every trainable parameter bound to this graph,
    /// accumulated into a store-shaped buffer.
    pub fn param_grads(&self, grads: &Grads<F>, store: &ParamStore<F>) -> super::params::GradStore<F> {
        let mut out = super::params::GradStore::zeros_like(store);
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = grads.get(node) {
                out.accumulate(pid, g);
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &[F], by: &mut [Option<Vec<F>>]) {
        let add_into = |by: &mut [Option<Vec<F>>], id: NodeId, contrib: &dyn Fn(&mut [F])| {
            let slot = &mut by[id.0];
            if slot.is_none() {
                *slot = Some(vec![F::zero(); self.value(id).numel()]);
            }
            contrib(slot.as_mut().unwrap());
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Var | Op::Param(_) | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                for &id in [a, b] {
                    if self.needs(id) {
                        add_into(by, id, &|buf| {
                            for (o, &gi) in buf.iter_mut().zip(g) {
                                *o = *o + gi;
                            }
                        });
                    }
                }
            }
            Op::AddRow { mat, row } => {
                if self.needs(*mat) {
                    add_into(by, *mat, &|buf| {
                        for (o, &gi) in buf.iter_mut().zip(g) {
                            *o = *o + gi;
                        }
                    });
                }
                if self.needs(*row) {
                    let cols = self.value(*row).numel();
                    let rows = g.len() / cols;
                    add_into(by, *row, &|buf| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] = buf[c] + g[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let c = *c;
                    add_into(by, *x, &|buf| {
                        for (o, &gi) in buf.iter_mut().zip(g) {
                            *o = *o + gi * c;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.value(*b).data();
                    add_into(by, *a, &|buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * other[k];
                        }
                    });
                }
                if self.needs(*b) {
                    let other = self.value(*a).data();
                    add_into(by, *b, &|buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * other[k];
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.n_rows(), ta.n_cols());
                let n = tb.n_cols();
                if self.needs(*a) {
                    // dA = dC @ B^T
                    add_into(by, *a, &|buf| mm_nt_acc(g, m, n, tb.data(), k, buf));
                }
                if self.needs(*b) {
                    // dB = A^T @ dC
                    add_into(by, *b, &|buf| mm_tn_acc(ta.data(), m, k, g, n, buf));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.n_rows(), ta.n_cols());
                let n = tb.n_rows();
                if self.needs(*a) {
                    // dA = dC @ B
                    add_into(by, *a, &|buf| mm_acc(g, m, n, tb.data(), k, buf));
                }
                if self.needs(*b) {
                    // dB = dC^T @ A
                    add_into(by, *b, &|buf| mm_tn_acc(g, m, n, ta.data(), k, buf));
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let inp = self.value(*x).data();
                    add_into(by, *x, &|buf| {
                        for k in 0..buf.len() {
                            if inp[k] > F::zero() {
                                buf[k] = buf[k] + g[k];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let y = self.nodes[i].value.data();
                    add_into(by, *x, &|buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * y[k] * (F::one() - y[k]);
                        }
                    });
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let y = self.nodes[i].value.data();
                    add_into(by, *x, &|buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * (F::one() - y[k] * y[k]);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let (rows, cols) = (y.n_rows(), y.n_cols());
                    add_into(by, *x, &|buf| {
                        for r in 0..rows {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let mut dot = F::zero();
                            for c in 0..cols {
                                dot = dot + gr[c] * yr[c];
                            }
                            for c in 0..cols {
                                buf[r * cols + c] = buf[r * cols + c] + yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let (rows, cols) = (tx.n_rows(), tx.n_cols());
                let eps = F::from_f64(LAYER_NORM_EPS);
                let nf = F::from_f64(cols as f64);
                // Recompute per-row statistics; cheaper than caching them on
                // the tape for every node.
                let mut xhat = vec![F::zero(); rows * cols];
                let mut inv_sigma = vec![F::zero(); rows];
                for r in 0..rows {
                    let row = tx.row(r);
                    let mut mean = F::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / nf;
                    let mut var = F::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / nf;
                    let inv = (var + eps).sqrt().recip();
                    inv_sigma[r] = inv;
                    for c in 0..cols {
                        xhat[r * cols + c] = (row[c] - mean) * inv;
                    }
                }
                if self.needs(*bias) {
                    add_into(by, *bias, &|buf| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] = buf[c] + g[r * cols + c];
                            }
                        }
                    });
                }
                if self.needs(*gain) {
                    let xhat = &xhat;
                    add_into(by, *gain, &|buf| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] = buf[c] + g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    });
                }
                if self.needs(*x) {
                    let xhat = &xhat;
                    let inv_sigma = &inv_sigma;
                    add_into(by, *x, &|buf| {
                        for r in 0..rows {
                            let mut mean_dxhat = F::zero();
                            let mut mean_dxhat_xhat = F::zero();
                            for c in 0..cols {
                                let dxh = g[r * cols + c] * tg.data()[c];
                                mean_dxhat = mean_dxhat + dxh;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[r * cols + c];
                            }
                            mean_dxhat = mean_dxhat / nf;
                            mean_dxhat_xhat = mean_dxhat_xhat / nf;
                            for c in 0..cols {
                                let dxh = g[r * cols + c] * tg.data()[c];
                                let dx = inv_sigma[r]
                                    * (dxh - mean_dxhat - xhat[r * cols + c] * mean_dxhat_xhat);
                                buf[r * cols + c] = buf[r * cols + c] + dx;
                            }
                        }
                    });
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let (rows, cols) = (t.n_rows(), t.n_cols());
                    let inv = F::from_f64(rows as f64).recip();
                    add_into(by, *x, &|buf| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[r * cols + c] = buf[r * cols + c] + g[c] * inv;
                            }
                        }
                    });
                }
            }
            Op::ConcatVec(a, b) => {
                let na = self.value(*a).numel();
                if self.needs(*a) {
                    add_into(by, *a, &|buf| {
                        for k in 0..na {
                            buf[k] = buf[k] + g[k];
                        }
                    });
                }
                if self.needs(*b) {
                    add_into(by, *b, &|buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[na + k];
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    if self.needs(p) {
                        let seg = &g[offset..offset + numel];
                        add_into(by, p, &|buf| {
                            for k in 0..numel {
                                buf[k] = buf[k] + seg[k];
                            }
                        });
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).n_rows();
                let total: usize = parts.iter().map(|&p| self.value(p).n_cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).n_cols();
                    if self.needs(p) {
                        add_into(by, p, &|buf| {
                            for r in 0..rows {
                                for j in 0..c {
                                    buf[r * c + j] = buf[r * c + j] + g[r * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::Slice0 { x, start, len } => {
                if self.needs(*x) {
                    let cols = self.value(*x).n_cols();
                    let stride = if self.value(*x).rank() == 1 { 1 } else { cols };
                    let (start, len) = (*start, *len);
                    add_into(by, *x, &|buf| {
                        for k in 0..len * stride {
                            buf[start * stride + k] = buf[start * stride + k] + g[k];
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(by, *x, &|buf| {
                        for (o, &gi) in buf.iter_mut().zip(g) {
                            *o = *o + gi;
                        }
                    });
                }
            }
            Op::EmbedRow { table, row } => {
                if self.needs(*table) {
                    let cols = self.value(*table).n_cols();
                    let row = *row;
                    add_into(by, *table, &|buf| {
                        for c in 0..cols {
                            buf[row * cols + c] = buf[row * cols + c] + g[c];
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, target } => {
                if self.needs(*logits) {
                    let t = self.value(*logits);
                    let row = t.data();
                    let max = row.iter().cloned().fold(row[0], F::max);
                    let mut sum = F::zero();
                    for &v in row {
                        sum = sum + (v - max).exp();
                    }
                    let gs = g[0];
                    let target = *target;
                    add_into(by, *logits, &|buf| {
                        for k in 0..buf.len() {
                            let p = (row[k] - max).exp() / sum;
                            let ind = if k == target { F::one() } else { F::zero() };
                            buf[k] = buf[k] + gs * (p - ind);
                        }
                    });
                }
            }
            Op::SigmoidBce { logits, targets } => {
                if self.needs(*logits) {
                    let t = self.value(*logits);
                    let row = t.data();
                    let gs = g[0];
                    add_into(by, *logits, &|buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + gs * (sigmoid_stable(row[k]) - targets[k]);
                        }
                    });
                }
            }
        }
    }
}

fn sigmoid_stable<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `out += a @ b`, with `a` of (m, k) and `b` of (k, n). The k-in-the-middle
/// loop order keeps both `b` and `out` accesses sequential.
pub(crate) fn mm_acc<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// `out += a @ b^T`, with `a` of (m, k) and `b` of (n, k). Each output entry
/// is a dot product of two contiguous rows.
pub(crate) fn mm_nt_acc<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out += a^T @ b`, with `a` of (m, k) and `b` of (m, n); result (k, n).
pub(crate) fn mm_tn_acc<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}
