//! SGD with momentum and weight decay, and the poly learning-rate schedule.

use crate::error::{shape_mismatch, Result};
use crate::tensor::Tensor;

/// `base · (1 − step/total)^power`, clamped to `step ≤ total`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let frac = 1.0 - step.min(total) as f64 / total as f64;
    base * frac.powf(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn with_velocity(mut self, velocity: Vec<Tensor>) -> Self {
        self.velocity = velocity;
        self
    }

    /// `v ← μv + g + wd·p; p ← p − lr·v`. Velocities are created lazily on
    /// the first step.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_mismatch("sgd", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_mismatch("sgd", p.shape(), g.shape()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_mismatch(
                "sgd state",
                &[self.velocity.len()],
                &[params.len()],
            ));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}
