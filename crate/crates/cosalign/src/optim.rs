//! SGD with momentum and polynomial learning-rate decay.
//!
//! The schedule is `lr = base_lr * (1 - iter / max_iter)^power`, clamped at
//! zero once `iter` reaches `max_iter`. Weight decay is added to the raw
//! gradient before the momentum update (the "L2 as gradient" convention):
//!
//! ```text
//! v <- momentum * v + (g + weight_decay * p)
//! p <- p - lr * v
//! ```

use std::collections::BTreeMap;

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iterations: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            max_iterations: 1,
        }
    }
}

pub struct Sgd<T: Real> {
    pub config: SgdConfig,
    iteration: usize,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        assert!(config.max_iterations >= 1);
        Sgd {
            config,
            iteration: 0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Restore the step counter (checkpoint resume).
    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    /// Learning rate the *next* step will use.
    pub fn lr(&self) -> f64 {
        let frac = 1.0 - self.iteration as f64 / self.config.max_iterations as f64;
        self.config.base_lr * frac.max(0.0).powf(self.config.power)
    }

    /// Apply one update to every parameter that received a gradient, then
    /// clear those gradients and advance the step counter.
    ///
    /// Parameters whose gradient is absent are skipped entirely — their
    /// momentum is not decayed and no weight decay is applied, matching the
    /// usual "None grad means untouched" convention.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) {
        let lr = self.lr();
        let m = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        let lr_t = T::from_f64(lr);
        for (name, p) in params {
            let Some(grad) = p.grad() else { continue };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.numel()]);
            assert_eq!(vel.len(), grad.len(), "velocity shape drifted for {name}");
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] + wd * data[i];
                vel[i] = m * vel[i] + g;
                data[i] = data[i] - lr_t * vel[i];
            }
            drop(data);
            p.zero_grad();
        }
        self.iteration += 1;
    }

    /// `(name, velocity)` pairs in name order, for serialization.
    pub fn velocities(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.velocity.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn set_velocity(&mut self, name: &str, v: Vec<T>) {
        self.velocity.insert(name.to_string(), v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, used for the discriminator. Moment state is
/// kept in the pipeline's scalar type so checkpoints round-trip exactly.
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    steps: usize,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_steps(&mut self, steps: usize) {
        self.steps = steps;
    }

    pub fn step(&mut self, params: &[(String, Tensor<T>)]) {
        self.steps += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let corr1 = 1.0 - b1.powi(self.steps as i32);
        let corr2 = 1.0 - b2.powi(self.steps as i32);
        for (name, p) in params {
            let Some(grad) = p.grad() else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.numel()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.numel()]);
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = self.config.lr * (mi / corr1) / ((vi / corr2).sqrt() + self.config.eps);
                data[i] = T::from_f64(data[i].as_f64() - update);
            }
            drop(data);
            p.zero_grad();
        }
    }

    /// `(name, first moment, second moment)` in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.first
            .iter()
            .map(|(n, m)| (n.as_str(), m.as_slice(), self.second[n].as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, first: Vec<T>, second: Vec<T>) {
        self.first.insert(name.to_string(), first);
        self.second.insert(name.to_string(), second);
    }
}
