use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `lr(iter) = lr0 * (1 - iter / total)^power`, zero once `iter >= total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total_iters: usize,
}

impl PolySchedule {
    pub fn lr(&self, iter: usize) -> f64 {
        if iter >= self.total_iters {
            return 0.0;
        }
        let frac = 1.0 - iter as f64 / self.total_iters as f64;
        self.lr0 * frac.powf(self.power)
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- m v + g`, `p <- p - lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let p = store.get_mut(*id);
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
    }
}
