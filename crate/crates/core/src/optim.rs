//! Adam with per-parameter step counts.

use ndarray::Zip;

use crate::autograd::Tensor;
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, first: vec![None; num_params], second: vec![None; num_params], steps: vec![0; num_params] }
    }

    /// Updates only the parameters that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>, lr: f64) {
        for (id, g) in grads {
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            Zip::from(&mut *m).and(&g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            Zip::from(&mut *v).and(&g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let eps = self.eps;
            let m = self.first[i].as_ref().expect("first moment");
            let v = self.second[i].as_ref().expect("second moment");
            Zip::from(store.value_mut(id)).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps[id.index()]
    }
}
