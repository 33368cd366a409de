//! AdamW with decoupled weight decay, the warmup/decay schedule, and global
//! gradient clipping.
//!
//! Moments are kept per parameter name and only for trainable parameters, so
//! frozen tensors never acquire optimizer state. A non-finite gradient
//! anywhere aborts the whole step before any parameter is touched.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    /// Completed optimizer steps (bias-correction exponent).
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One named parameter update: `(name, tensor, gradient)`.
pub type ParamUpdate<'a, T> = (String, &'a mut Tensor<T>, Vec<f64>);

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    /// Increments the step counter; call once per optimizer step, before
    /// the per-parameter updates.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected update of one parameter at the current step:
    /// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    /// Gradients must have been finiteness-checked by the caller (the step
    /// driver aborts before touching anything).
    pub fn update_param<T: Scalar>(
        &mut self,
        name: &str,
        tensor: &mut Tensor<T>,
        grad: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let n = tensor.numel();
        if grad.len() != n {
            return Err(Error::Dim {
                op: "adamw_step",
                detail: alloc::format!(
                    "gradient length {} does not match parameter {name} ({n})",
                    grad.len()
                ),
            });
        }
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, t);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, t);
        let moments = self
            .moments
            .entry(name.into())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
        let data = tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * g;
            moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            let theta = data[i].to_f64();
            let update = m_hat / (libm::sqrt(v_hat) + ADAM_EPS) + weight_decay * theta;
            data[i] = T::from_f64(theta - lr * update);
        }
        Ok(())
    }

    /// One whole AdamW step over named parameter/gradient pairs. Any
    /// non-finite gradient aborts before any parameter is touched.
    /// `no_decay` marks parameters excluded from weight decay (biases, norm
    /// gains, the temperature).
    pub fn apply<T: Scalar>(
        &mut self,
        updates: &mut [ParamUpdate<'_, T>],
        lr: f64,
        weight_decay: f64,
        no_decay: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, tensor, grad) in updates.iter() {
            if grad.len() != tensor.numel() {
                return Err(Error::Dim {
                    op: "adamw_step",
                    detail: alloc::format!(
                        "gradient length {} does not match parameter {name} ({})",
                        grad.len(),
                        tensor.numel()
                    ),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad { param: name.clone() });
            }
        }
        self.advance();
        for (name, tensor, grad) in updates.iter_mut() {
            let wd = if no_decay(name) { 0.0 } else { weight_decay };
            self.update_param(name, tensor, grad, lr, wd)?;
        }
        Ok(())
    }
}

/// Default weight-decay exclusion: one-dimensional parameters (biases, norm
/// gains/biases, positions are 2-d and do decay) and the temperature.
pub fn default_no_decay(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gain")
        || name == "log_tau"
        || name == "out_bias"
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = libm::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_fraction` of
/// `total_steps`, then linear decay back to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_fraction: f64, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    if total_steps == 0 {
        return 0.0;
    }
    let warmup_steps = libm::floor(warmup_fraction * total_steps as f64) as usize;
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return base_lr;
    }
    let remaining = (total_steps - step) as f64;
    let span = (total_steps - warmup_steps) as f64;
    base_lr * remaining / span
}
