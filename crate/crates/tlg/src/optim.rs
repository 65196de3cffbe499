//! Adaptive per-parameter optimizer with decoupled weight decay.

use ndarray::prelude::*;
use ndarray::IxDyn;

use crate::params::ParamStore;

pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let (m, v) = store
            .iter()
            .map(|(_, p)| {
                (ArrayD::zeros(IxDyn(p.value.shape())), ArrayD::zeros(IxDyn(p.value.shape())))
            })
            .unzip();
        AdamW { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m, v, t: 0 }
    }

    /// One update from per-parameter gradients (absent gradients are zero).
    /// Weight decay is decoupled from the adaptive step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(grads.len(), store.len(), "gradient list must match the store");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let mut value = store.value(id).clone();
            ndarray::Zip::from(&mut value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.learning_rate * (mhat / (vhat.sqrt() + self.eps))
                        + self.learning_rate * self.weight_decay * *p;
                });
            store.set(id, value);
        }
    }
}
