//! Adam optimizer with bias correction.

use super::params::{GradStore, ParamStore};
use super::tensor::{Real, Tensor};

/// Adam state: first and second moment estimates per parameter entry plus
/// the shared step counter. A parameter whose gradient is absent for a step
/// is updated with a zero gradient, which leaves both its moments and its
/// value bit-identical.
pub struct Adam<F: Real> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = (0..store.len())
            .map(|i| vec![F::zero(); store.value(super::params::ParamId(i)).numel()])
            .collect();
        let v = (0..store.len())
            .map(|i| vec![F::zero(); store.value(super::params::ParamId(i)).numel()])
            .collect();
        Adam {
            m,
            v,
            t: 0,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradStore<F>, lr: F) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for i in 0..store.len() {
            let id = super::params::ParamId(i);
            if !store.is_trainable(id) {
                continue;
            }
            let numel = store.value(id).numel();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let grad = grads.get(id);
            let mut data = store.value(id).data().to_vec();
            for k in 0..numel {
                let g = grad.map_or(F::zero(), |b| b[k]);
                m[k] = self.beta1 * m[k] + (F::one() - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (F::one() - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] = data[k] - lr * mhat / (vhat.sqrt() + self.eps);
            }
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::from_vec(shape, data));
        }
    }

    /// Serializable view of the moment buffers, in store id order.
    pub fn state(&self) -> (&[Vec<F>], &[Vec<F>], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Restores moment buffers saved by [`Adam::state`].
    pub fn restore(&mut self, m: Vec<Vec<F>>, v: Vec<Vec<F>>, t: u64) {
        assert_eq!(m.len(), self.m.len(), "adam restore: m buffer count");
        assert_eq!(v.len(), self.v.len(), "adam restore: v buffer count");
        for (cur, new) in self.m.iter().zip(&m) {
            assert_eq!(cur.len(), new.len(), "adam restore: m buffer length");
        }
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
