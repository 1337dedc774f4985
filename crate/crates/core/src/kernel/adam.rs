use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and coupled L2 weight decay
/// (`g + wd * theta` feeds both moment estimates).
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor of `store` from its gradient slot.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, param) in store.iter_mut() {
            let Some(grad) = param.grad.as_ref() else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            for (((theta, &g), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let th = theta.as_f64();
                let g = g.as_f64() + weight_decay * th;
                let mn = beta1 * mi.as_f64() + (1.0 - beta1) * g;
                let vn = beta2 * vi.as_f64() + (1.0 - beta2) * g * g;
                *mi = T::lit(mn);
                *vi = T::lit(vn);
                let mhat = mn / c1;
                let vhat = vn / c2;
                *theta = T::lit(th - lr * mhat / (vhat.sqrt() + eps));
            }
        }
    }
}
