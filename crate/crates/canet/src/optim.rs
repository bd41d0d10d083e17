//! Mini-batch SGD with momentum and coupled weight decay, plus the poly
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ParamId};
use crate::tensor::Tensor;

/// lr = base_lr * (1 - iter/total_iters)^power.
pub fn poly_lr(base_lr: f64, iter: u64, total_iters: u64, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::invalid("poly_lr", "total_iters must be positive"));
    }
    if iter > total_iters {
        return Err(Error::invalid(
            "poly_lr",
            format!("iter {iter} exceeds total_iters {total_iters}"),
        ));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

pub struct SgdOptimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdOptimizer {
    pub fn new(graph: &ModelGraph, momentum: f64, weight_decay: f64) -> Self {
        let velocity = graph
            .iter()
            .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape())))
            .collect();
        SgdOptimizer { momentum, weight_decay, velocity }
    }

    /// v <- momentum*v + (g + wd*w); w <- w - lr*v. Weight decay is skipped
    /// for exempt parameters (normalization scales/shifts, biases).
    pub fn step(&mut self, graph: &mut ModelGraph, lr: f64) -> Result<()> {
        for id in graph.ids().collect::<Vec<_>>() {
            let Some(v) = self.velocity[id.0].as_mut() else { continue };
            let p = graph.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            if grad.shape() != p.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient {} does not match parameter {} for {}", grad.shape(), p.value.shape(), p.name),
                ));
            }
            let wd = if p.weight_decay_exempt { 0.0 } else { self.weight_decay };
            let value = p.value.data_mut();
            let vel = v.data_mut();
            for i in 0..value.len() {
                let g = grad.data()[i] + wd * value[i];
                vel[i] = self.momentum * vel[i] + g;
                value[i] -= lr * vel[i];
            }
        }
        Ok(())
    }

    pub fn velocity_of(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.0).and_then(|v| v.as_ref())
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor) {
        self.velocity[id.0] = Some(v);
    }
}
