//! Non-private optimisers used for the public pre-training stages.

use crate::autodiff::GradMap;
use crate::error::{bail, Result};
use crate::params::ParamStore;
use std::collections::HashMap;

/// SGD with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, g) in grads.iter() {
            let Some(p) = store.get_mut(name) else {
                bail!(Contract, "gradient for unknown parameter {name}");
            };
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, vel), d) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + d;
                *w -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads.iter() {
            let Some(p) = store.get_mut(name) else {
                bail!(Contract, "gradient for unknown parameter {name}");
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (i, (w, d)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
