use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{contract, Error, Result};
use crate::math;
use crate::Tensor;

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-4;

/// SGD with momentum, weight decay and a cosine schedule over `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        Self { lr0, momentum: MOMENTUM, weight_decay: WEIGHT_DECAY, total_steps, step: 0, velocity: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `0.5 * lr0 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(state: &OptimizerState) -> Result<f64> {
    let (t, total) = (state.step, state.total_steps);
    if t > total {
        return Err(contract!("step {} beyond schedule length {}", t, total));
    }
    if total == 0 {
        return Ok(state.lr0);
    }
    Ok(0.5 * state.lr0 * (1.0 + math::cos(PI * t as f64 / total as f64)))
}

/// One momentum step: `v <- m v + (g + wd p)`, `p <- p - lr(t) v`, `t <- t + 1`.
/// Returns the learning rate that was applied.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<f64> {
    if params.len() != grads.len() {
        return Err(contract!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    if state.step >= state.total_steps {
        return Err(contract!("schedule of {} steps is exhausted", state.total_steps));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(contract!("gradient {} has shape {:?}, parameter {:?}", i, g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Divergence(alloc::format!("non-finite gradient for parameter {}", i)));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    } else if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, p)| v.shape() != p.shape())
    {
        return Err(contract!("velocity buffers do not match parameters"));
    }
    let lr = cosine_lr(state)?;
    let (m, wd) = (state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + (gi + wd * *pi);
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(lr)
}
