//! Adam optimizer with bias correction and optional global-norm clipping.
//!
//! The paper never names its optimizer; Adam with the usual defaults is the
//! community standard for Transformer training and matches the quoted
//! learning-rate range. Clipping at global norm 1 guards against the spikes
//! unrolled objectives produce when a freshly initialized block joins the
//! window.

use serde::{Deserialize, Serialize};

use super::TensorData;
use crate::error::{Error, Result};
use crate::scalar::{real, Real};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied inside `adam_step`; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// First/second moment buffers for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(lens: &[usize]) -> Self {
        AdamState {
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_tensors(tensors: &[&TensorData<T>]) -> Self {
        let lens: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
        Self::new(&lens)
    }
}

/// Euclidean norm over the `grad` buffers of a parameter group.
pub fn global_grad_norm<T: Real>(tensors: &[&mut TensorData<T>]) -> T {
    let mut acc = T::zero();
    for t in tensors {
        if let Some(g) = &t.grad {
            for &x in g {
                acc = acc + x * x;
            }
        }
    }
    acc.sqrt()
}

/// Scales every gradient buffer in place.
pub fn scale_grads<T: Real>(tensors: &mut [&mut TensorData<T>], s: T) {
    for t in tensors.iter_mut() {
        if let Some(g) = &mut t.grad {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }
}

/// One Adam update over a parameter group; gradients are read from each
/// tensor's `grad` buffer (missing buffers are treated as zero).
pub fn adam_step<T: Real>(
    cfg: &AdamConfig,
    state: &mut AdamState<T>,
    lr: T,
    tensors: &mut [&mut TensorData<T>],
) -> Result<()> {
    if state.m.len() != tensors.len() {
        return Err(Error::Contract {
            detail: format!(
                "optimizer state tracks {} tensors, group has {}",
                state.m.len(),
                tensors.len()
            ),
        });
    }
    if let Some(clip) = cfg.clip_norm {
        let clip = real::<T>(clip);
        let norm = global_grad_norm(tensors);
        if norm > clip {
            scale_grads(tensors, clip / norm);
        }
    }
    state.step += 1;
    let b1 = real::<T>(cfg.beta1);
    let b2 = real::<T>(cfg.beta2);
    let eps = real::<T>(cfg.eps);
    let bc1 = T::one() - b1.powi(state.step as i32);
    let bc2 = T::one() - b2.powi(state.step as i32);
    for (idx, t) in tensors.iter_mut().enumerate() {
        if state.m[idx].len() != t.numel() {
            return Err(Error::Contract {
                detail: format!(
                    "optimizer slot {idx} sized {} vs tensor {}",
                    state.m[idx].len(),
                    t.numel()
                ),
            });
        }
        let zeros;
        let g: &[T] = match &t.grad {
            Some(g) => g,
            None => {
                zeros = vec![T::zero(); t.numel()];
                &zeros
            }
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            t.data[i] = t.data[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
