use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{OffError, Result};
use crate::net::ParamStore;
use crate::tensor::Tensor;

/// `v <- momentum * v + g; p <- p - lr * v`, elementwise.
pub fn sgd_momentum_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(OffError::shape(format!(
            "sgd step over {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let nv = momentum * *v as f64 + g as f64;
        *v = nv as f32;
        *p = (*p as f64 - lr * *v as f64) as f32;
    }
    Ok(())
}

/// `base_lr * 0.1^k` with `k` the number of milestones `<= iter`.
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    let k = config.lr_milestones.iter().filter(|&&m| m <= iter).count();
    config.base_lr * 0.1f64.powi(k as i32)
}

/// Momentum buffers keyed by parameter name, created on first use.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step to every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| OffError::config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(OffError::shape(format!(
                    "`{name}` is {} but its gradient is {}",
                    p.shape(),
                    g.shape()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            sgd_momentum_step(p.data_mut(), g.data(), v, lr, self.momentum)?;
        }
        Ok(())
    }
}
