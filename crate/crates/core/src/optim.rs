//! Adam optimizer with bias correction, plus the warmup / inverse-sqrt
//! learning-rate schedule and global-norm gradient clipping.
//!
//! The optimizer owns first/second-moment state aligned one-to-one with the
//! tensor list it was first stepped with; feeding it a differently shaped
//! list later is an error rather than silent corruption.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Peak-scaled schedule: linear warmup for `warmup` steps, then inverse
/// square-root decay. `step` is 1-based. With zero warmup the rate is the
/// peak from the first step onward.
pub fn lr_schedule(peak: f64, warmup: usize, step: usize) -> f64 {
    assert!(step >= 1, "schedule steps are 1-based");
    if warmup == 0 {
        return peak;
    }
    let s = step as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. Errors on non-finite gradients so training
/// can abort instead of silently washing NaNs through the moments.
pub fn clip_global_norm<T: Real>(params: &mut [&mut Tensor<T>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            for &v in g {
                sq += v.to_f64() * v.to_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "clip_global_norm",
            detail: format!("gradient norm {norm}"),
        });
    }
    if norm > max_norm && max_norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }
    Ok(norm)
}

pub struct Adam<T: Real> {
    peak_lr: f64,
    warmup: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(peak_lr: f64, warmup: usize) -> Self {
        Adam {
            peak_lr,
            warmup,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next `step` call will use.
    pub fn next_lr(&self) -> f64 {
        lr_schedule(self.peak_lr, self.warmup, self.step + 1)
    }

    /// One update over the trainable tensors. Missing gradients count as
    /// zero (the moment tail still decays). Returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<f64> {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![T::ZERO; p.numel()]);
                self.v.push(vec![T::ZERO; p.numel()]);
            }
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg {
                what: "optimizer state",
                detail: format!(
                    "{} tensors passed, state holds {}",
                    params.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let lr = lr_schedule(self.peak_lr, self.warmup, self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_b1 = T::from_f64(1.0 - self.beta1);
        let one_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for (idx, p) in params.iter_mut().enumerate() {
            if self.m[idx].len() != p.numel() {
                return Err(Error::InvalidArg {
                    what: "optimizer state",
                    detail: format!(
                        "tensor {idx} has {} values, state expects {}",
                        p.numel(),
                        self.m[idx].len()
                    ),
                });
            }
            let has_grad = p.grad().is_some();
            let n = p.numel();
            for i in 0..n {
                let g = if has_grad { p.grad().unwrap()[i] } else { T::ZERO };
                let m = &mut self.m[idx][i];
                *m = b1 * *m + one_b1 * g;
                let v = &mut self.v[idx][i];
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                let upd = lr_t * mhat / (vhat.sqrt() + eps);
                p.data_mut()[i] -= upd;
            }
        }
        Ok(lr)
    }
}
