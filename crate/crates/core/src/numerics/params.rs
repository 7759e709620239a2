//! Named parameter storage and per-parameter gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};

/// Handle into a [`ParamStore`]. Valid only for the store that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry<F: Real> {
    name: String,
    value: Tensor<F>,
    trainable: bool,
}

/// Flat collection of named parameters. Names are unique; iteration orders
/// are either creation order (ids) or name order (checkpoints), never hash
/// order.
pub struct ParamStore<F: Real> {
    entries: Vec<Entry<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set_value: shape change for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// All ids in name order. Checkpoints and gradient checks use this so
    /// their layout is independent of construction order.
    pub fn ids_by_name(&self) -> Vec<ParamId> {
        self.by_name.values().map(|&i| ParamId(i)).collect()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Gradient buffer parallel to a [`ParamStore`]. Entries that never received
/// a gradient stay `None` and behave as zero.
pub struct GradStore<F: Real> {
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradStore<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        GradStore {
            bufs: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[F]) {
        let slot = &mut self.bufs[id.0];
        match slot {
            None => *slot = Some(grad.to_vec()),
            Some(buf) => {
                assert_eq!(buf.len(), grad.len(), "gradient length changed");
                for (o, &g) in buf.iter_mut().zip(grad) {
                    *o = *o + g;
                }
            }
        }
    }

    /// Adds another gradient buffer into this one.
    pub fn add_assign(&mut self, other: &GradStore<F>) {
        assert_eq!(self.bufs.len(), other.bufs.len(), "grad store size mismatch");
        for (i, src) in other.bufs.iter().enumerate() {
            if let Some(g) = src {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for buf in self.bufs.iter_mut().flatten() {
            for v in buf.iter_mut() {
                *v = *v * c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.bufs[id.0].as_deref()
    }

    /// Euclidean norm over every stored gradient entry.
    pub fn global_norm(&self) -> F {
        let mut sq = F::zero();
        for buf in self.bufs.iter().flatten() {
            for &v in buf {
                sq = sq + v * v;
            }
        }
        sq.sqrt()
    }

    /// Scales all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: F) {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }
}

/// Per-graph cache that binds each parameter onto the tape at most once, so
/// repeated uses share one node and one gradient buffer.
pub struct ParamBinder {
    nodes: Vec<Option<NodeId>>,
}

impl ParamBinder {
    pub fn new<F: Real>(store: &ParamStore<F>) -> Self {
        ParamBinder {
            nodes: vec![None; store.len()],
        }
    }

    pub fn node<F: Real>(&mut self, g: &mut Graph<F>, store: &ParamStore<F>, id: ParamId) -> NodeId {
        match self.nodes[id.0] {
            Some(n) => n,
            None => {
                let n = g.param(store, id);
                self.nodes[id.0] = Some(n);
                n
            }
        }
    }
}

/// Uniform Xavier/Glorot initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`. Draws happen in `f64` so the stream
/// of random numbers is identical for every scalar type.
pub fn xavier_uniform<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<F> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-a..a)))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Rank-1 uniform initialization on `(-a, a)`.
pub fn uniform_vector<F: Real>(rng: &mut impl Rng, len: usize, a: f64) -> Tensor<F> {
    let data = (0..len).map(|_| F::from_f64(rng.gen_range(-a..a))).collect();
    Tensor::vector(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ids_by_name_sorts_lexicographically() {
        let mut s = ParamStore::<f32>::new();
        let b = s.add("b.weight", Tensor::vector(vec![1.0]), true);
        let a = s.add("a.weight", Tensor::vector(vec![2.0]), true);
        assert_eq!(s.ids_by_name(), vec![a, b]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::vector(vec![0.0]), true);
        s.add("w", Tensor::vector(vec![0.0]), true);
    }

    #[test]
    fn binder_reuses_the_same_node() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 2.0]), true);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&s);
        let n1 = binder.node(&mut g, &s, id);
        let n2 = binder.node(&mut g, &s, id);
        assert_eq!(n1, n2);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn clip_leaves_small_gradients_alone_and_rescales_large_ones() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::vector(vec![0.0, 0.0]), true);
        let mut gs = GradStore::zeros_like(&s);
        gs.accumulate(id, &[3.0, 4.0]);
        gs.clip_global_norm(10.0);
        assert_eq!(gs.get(id).unwrap(), &[3.0, 4.0]);
        gs.clip_global_norm(1.0);
        let g = gs.get(id).unwrap();
        approx::assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn xavier_draws_are_identical_across_scalar_types() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a: Tensor<f32> = xavier_uniform(&mut r1, 4, 4);
        let b: Tensor<f64> = xavier_uniform(&mut r2, 4, 4);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
