use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                errs.push(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.clip_norm > 0.0) {
            errs.push(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(self.eps > 0.0) {
            errs.push(format!("eps must be positive, got {}", self.eps));
        }
        if self.weight_decay < 0.0 {
            errs.push(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        errs
    }
}

/// AdamW moments plus step and token counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub tokens_seen: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            m,
            v,
            step: 0,
            tokens_seen: 0,
        }
    }
}

/// Global L2 norm of all gradients, as f64.
pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Scales all gradients by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradNorm(norm));
    }
    if norm > max_norm {
        let scale = S::cast(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * scale);
        }
    }
    Ok(norm)
}

/// One decoupled AdamW update. `decay[i]` selects whether parameter `i`
/// receives weight decay.
pub fn adamw_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    decay: &[bool],
    state: &mut OptimizerState<S>,
    hyper: &OptimHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::shape(
            "adamw_step",
            &[params.len(), decay.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let wd = if decay[i] { hyper.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (x, &gs)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = gs.as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
            m[j] = S::cast(mj);
            v[j] = S::cast(vj);
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let xv = x.as_f64();
            *x = S::cast(xv - lr * (m_hat / (v_hat.sqrt() + hyper.eps) + wd * xv));
        }
    }
    Ok(())
}
