use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffcore::Tensor;
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Adadelta { rho: 0.95, eps: 1e-6, weight_decay: 1e-6 }
    }
}

/// Running averages `E[g²]` and `E[Δx²]` of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulator {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl Accumulator {
    pub fn zeros(n: usize) -> Self {
        Accumulator { sq_grad: vec![0.0; n], sq_update: vec![0.0; n] }
    }
}

/// One Adadelta update in place. Nothing is modified when `grad` is not finite.
pub fn adadelta_step(
    param: &mut [f64],
    grad: &[f64],
    acc: &mut Accumulator,
    hp: &Adadelta,
) -> Result<(), TrainError> {
    if param.len() != grad.len() || acc.sq_grad.len() != param.len() || acc.sq_update.len() != param.len() {
        return Err(TrainError::Shape(format!(
            "param {} / grad {} / accumulators {}",
            param.len(),
            grad.len(),
            acc.sq_grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    for i in 0..param.len() {
        let g = grad[i] + hp.weight_decay * param[i];
        let eg = hp.rho * acc.sq_grad[i] + (1.0 - hp.rho) * g * g;
        let dx = -((acc.sq_update[i] + hp.eps).sqrt() / (eg + hp.eps).sqrt()) * g;
        acc.sq_grad[i] = eg;
        acc.sq_update[i] = hp.rho * acc.sq_update[i] + (1.0 - hp.rho) * dx * dx;
        param[i] += dx;
    }
    Ok(())
}

/// Accumulators for every parameter of a store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hyper: Adadelta,
    pub slots: Vec<Accumulator>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, hyper: Adadelta) -> Self {
        let slots = params.tensors().iter().map(|t| Accumulator::zeros(t.len())).collect();
        OptimizerState { hyper, slots }
    }

    /// Updates every parameter, or none if any gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), TrainError> {
        if grads.len() != self.slots.len() || params.len() != grads.len() {
            return Err(TrainError::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient);
        }
        for ((p, g), acc) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.slots) {
            adadelta_step(p.data_mut(), g.data(), acc, &self.hyper)?;
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
