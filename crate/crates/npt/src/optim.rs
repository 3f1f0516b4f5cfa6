//! Training recipe: LAMB (bias-corrected Adam direction rescaled per
//! tensor by a trust ratio) wrapped in Lookahead slow-weight averaging,
//! global-norm gradient clipping, and a flat-then-cosine learning-rate
//! schedule.
//!
//! Moments and all update arithmetic run in f64 regardless of the
//! parameter precision; only the final weights are cast back.

use crate::error::{NptError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LambHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lookahead slow-weight step size.
    pub alpha_slow: f64,
    /// Fast steps between slow-weight syncs.
    pub k_la: usize,
    pub clip_norm: f64,
}

impl Default for LambHyper {
    fn default() -> Self {
        LambHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            alpha_slow: 0.5,
            k_la: 6,
            clip_norm: 1.0,
        }
    }
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = T::from_f64(v.to_f64() * scale);
            }
        }
    }
    norm
}

/// Learning rate at `step` of `total`: `base` for the first
/// `flat_frac * total` steps, then one cosine half-wave down to 0.
pub fn lr_at(step: u64, total: u64, base: f64, flat_frac: f64) -> f64 {
    let flat = (flat_frac * total as f64).floor() as u64;
    if step < flat || total <= flat {
        return base;
    }
    let t = (step - flat) as f64 / (total - flat) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// Per-tensor first/second moments, Lookahead slow weights, and the step
/// counters. One instance per training run; tensor order is fixed at
/// construction and must match every later call.
pub struct Optimizer {
    pub hyper: LambHyper,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    slow: Vec<Vec<f64>>,
    t: u64,
    fast_steps: usize,
}

impl Optimizer {
    pub fn new<T: Scalar>(hyper: LambHyper, named: &[(String, Tensor<T>)]) -> Optimizer {
        let names = named.iter().map(|(n, _)| n.clone()).collect();
        let m = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let slow = named
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x.to_f64()).collect())
            .collect();
        Optimizer {
            hyper,
            names,
            m,
            v,
            slow,
            t: 0,
            fast_steps: 0,
        }
    }

    fn check_arity(&self, slots: usize, grads: usize) -> Result<()> {
        if slots != self.names.len() || grads != self.names.len() {
            return Err(NptError::internal(format!(
                "optimizer tracks {} tensors, got {slots} slots and {grads} gradients",
                self.names.len()
            )));
        }
        Ok(())
    }

    /// One LAMB update. Replaces each parameter tensor with a fresh leaf:
    ///
    /// ```text
    /// m   <- b1 m + (1 - b1) g          mhat = m / (1 - b1^t)
    /// v   <- b2 v + (1 - b2) g^2        vhat = v / (1 - b2^t)
    /// r   = mhat / (sqrt(vhat) + eps)
    /// w   <- w - lr * (|w| / |r|) * r       (trust ratio 1 if a norm is 0)
    /// ```
    pub fn lamb_step<T: Scalar>(
        &mut self,
        slots: &mut [&mut Tensor<T>],
        grads: &[Vec<T>],
        lr: f64,
    ) -> Result<()> {
        self.check_arity(slots.len(), grads.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hyper.beta2.powi(self.t as i32);
        for (i, (slot, grad)) in slots.iter_mut().zip(grads).enumerate() {
            if grad.len() != slot.numel() {
                return Err(NptError::internal(format!(
                    "gradient for {} has {} values, tensor has {}",
                    self.names[i],
                    grad.len(),
                    slot.numel()
                )));
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(NptError::internal(format!(
                    "non-finite gradient in tensor {}",
                    self.names[i]
                )));
            }
            let w: Vec<f64> = slot.data().iter().map(|x| x.to_f64()).collect();
            let mut update = vec![0.0; w.len()];
            for (j, g) in grad.iter().enumerate() {
                let g = g.to_f64();
                self.m[i][j] = self.hyper.beta1 * self.m[i][j] + (1.0 - self.hyper.beta1) * g;
                self.v[i][j] = self.hyper.beta2 * self.v[i][j] + (1.0 - self.hyper.beta2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                update[j] = mhat / (vhat.sqrt() + self.hyper.eps);
            }
            let w_norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u_norm = update.iter().map(|x| x * x).sum::<f64>().sqrt();
            let trust = if w_norm > 0.0 && u_norm > 0.0 { w_norm / u_norm } else { 1.0 };
            let data: Vec<T> = w
                .iter()
                .zip(&update)
                .map(|(w, u)| T::from_f64(w - lr * trust * u))
                .collect();
            **slot = Tensor::param(&slot.shape().to_vec(), data)?;
        }
        Ok(())
    }

    /// Call after every fast step. Every `k_la`-th call folds the fast
    /// weights into the slow ones (`slow += alpha (fast - slow)`) and
    /// resets the fast weights to them; moments are retained.
    pub fn lookahead_sync<T: Scalar>(&mut self, slots: &mut [&mut Tensor<T>]) -> Result<()> {
        self.check_arity(slots.len(), slots.len())?;
        self.fast_steps += 1;
        if self.fast_steps < self.hyper.k_la {
            return Ok(());
        }
        self.fast_steps = 0;
        for (i, slot) in slots.iter_mut().enumerate() {
            let data: Vec<T> = slot
                .data()
                .iter()
                .zip(self.slow[i].iter_mut())
                .map(|(fast, slow)| {
                    *slow += self.hyper.alpha_slow * (fast.to_f64() - *slow);
                    T::from_f64(*slow)
                })
                .collect();
            **slot = Tensor::param(&slot.shape().to_vec(), data)?;
        }
        Ok(())
    }

    /// Clip, LAMB, Lookahead: the full recipe for one step.
    pub fn step<T: Scalar>(
        &mut self,
        slots: &mut [&mut Tensor<T>],
        grads: &mut [Vec<T>],
        lr: f64,
    ) -> Result<()> {
        clip_gradients(grads, self.hyper.clip_norm);
        self.lamb_step(slots, grads, lr)?;
        self.lookahead_sync(slots)
    }
}
