//! Parameterized building blocks composed from graph primitives.
//!
//! Each block owns [`ParamId`]s created at construction and exposes a
//! forward method that appends nodes to a [`Graph`]. All randomness comes
//! from the caller's RNG, so construction order fixes initialization.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{xavier_uniform, ParamBinder, ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// Fully connected layer `x @ w + b`; accepts rank-1 or rank-2 input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(rng, d_in, d_out), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]), true);
        Linear { w, b }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        x: NodeId,
    ) -> NodeId {
        let w = binder.node(g, store, self.w);
        let b = binder.node(g, store, self.b);
        let xw = g.matmul(x, w);
        if g.value(xw).rank() == 1 {
            g.add(xw, b)
        } else {
            g.add_row(xw, b)
        }
    }
}

/// Learned per-feature gain and bias around row-wise normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Tensor::full(vec![dim], F::one()), true);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![dim]), true);
        LayerNorm { gain, bias }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        x: NodeId,
    ) -> NodeId {
        let gain = binder.node(g, store, self.gain);
        let bias = binder.node(g, store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two linear layers around a ReLU; hidden width is the caller's choice.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let l1 = Linear::new(store, rng, &format!("{name}.l1"), dim, hidden);
        let l2 = Linear::new(store, rng, &format!("{name}.l2"), hidden, dim);
        FeedForward { l1, l2 }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        x: NodeId,
    ) -> NodeId {
        let h = self.l1.forward(g, store, binder, x);
        let h = g.relu(h);
        self.l2.forward(g, store, binder, h)
    }
}

/// Gated linear unit: `(x @ wa + ba) * sigmoid(x @ wb + bb)`.
#[derive(Clone, Copy, Debug)]
pub struct Glu {
    pub value: Linear,
    pub gate: Linear,
}

impl Glu {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let value = Linear::new(store, rng, &format!("{name}.value"), d_in, d_out);
        let gate = Linear::new(store, rng, &format!("{name}.gate"), d_in, d_out);
        Glu { value, gate }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        x: NodeId,
    ) -> NodeId {
        let v = self.value.forward(g, store, binder, x);
        let gate = self.gate.forward(g, store, binder, x);
        let gate = g.sigmoid(gate);
        g.mul(v, gate)
    }
}

/// Single LSTM cell. Gate pre-activations are laid out `[i | f | g | o]`;
/// the forget-gate bias quarter is initialized to one.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.add(
            format!("{name}.wx"),
            xavier_uniform(rng, d_in, 4 * hidden),
            true,
        );
        let wh = store.add(
            format!("{name}.wh"),
            xavier_uniform(rng, hidden, 4 * hidden),
            true,
        );
        let mut bias = vec![F::zero(); 4 * hidden];
        for v in bias.iter_mut().take(2 * hidden).skip(hidden) {
            *v = F::one();
        }
        let b = store.add(format!("{name}.b"), Tensor::vector(bias), true);
        LstmCell {
            wx,
            wh,
            b,
            hidden,
        }
    }

    /// `(h, c) -> (h', c')` for one step. All of `x`, `h`, `c` are rank-1.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let wx = binder.node(g, store, self.wx);
        let wh = binder.node(g, store, self.wh);
        let b = binder.node(g, store, self.b);
        let xz = g.matmul(x, wx);
        let hz = g.matmul(h, wh);
        let s = g.add(xz, hz);
        let gates = g.add(s, b);
        let n = self.hidden;
        let i_raw = g.slice0(gates, 0, n);
        let f_raw = g.slice0(gates, n, n);
        let g_raw = g.slice0(gates, 2 * n, n);
        let o_raw = g.slice0(gates, 3 * n, n);
        let i = g.sigmoid(i_raw);
        let f = g.sigmoid(f_raw);
        let cand = g.tanh(g_raw);
        let o = g.sigmoid(o_raw);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        let c_next = g.add(fc, ic);
        let c_tanh = g.tanh(c_next);
        let h_next = g.mul(o, c_tanh);
        (h_next, c_next)
    }
}

/// Token embedding table.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = store.add(
            format!("{name}.table"),
            xavier_uniform(rng, vocab, dim),
            true,
        );
        Embedding { table, vocab }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        token: usize,
    ) -> NodeId {
        let table = binder.node(g, store, self.table);
        g.embed_row(table, token)
    }
}
