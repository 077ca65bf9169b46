//! Adam over a [`ParamStore`].

use crate::autodiff::{Gradients, Tensor};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable entry, reading gradients through `bound`.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let Some(g) = grads.get(bound.vars()[i]) else {
                continue;
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &gi), mi), vi) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0]), true);
        let frozen = store.add("f", Tensor::from_vec(vec![3.0]), false);
        let mut adam = Adam::new(&store, 0.1);
        let g = Graph::new();
        let b = store.bind(&g);
        let sq = g.mul(b.var(id), b.var(id)).unwrap();
        let fz = g.mul(sq, b.var(frozen)).unwrap();
        let loss = g.sum(fz).unwrap();
        let grads = g.backward(loss).unwrap();
        adam.step(&mut store, &b, &grads);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 1.9).abs() < 1e-9);
        assert_eq!(store.get(frozen).data(), &[3.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![5.0, -3.0]), true);
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let g = Graph::new();
            let b = store.bind(&g);
            let target = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
            let d = g.sub(b.var(id), target).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            adam.step(&mut store, &b, &grads);
        }
        let w = store.get(id).data();
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] - 2.0).abs() < 1e-3, "{w:?}");
    }
}
