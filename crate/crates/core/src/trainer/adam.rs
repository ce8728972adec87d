//! Adam with bias correction over a fixed, ordered list of tensors.

use crate::error::{Result, VredError};
use crate::layers::Parameters;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
    /// Learning rate in effect after the last update.
    pub lr: f64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }
}

/// One Adam update. `grads[i]` belongs to the i-th tensor of `params`;
/// `None` marks a frozen tensor whose value and moments stay untouched.
/// With `clip_norm`, the joint gradient is rescaled to at most that L2 norm.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() {
        return Err(VredError::Contract(format!(
            "adam_step over {} tensors with {} gradients and {} moments",
            names.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for (name, g) in names.iter().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(VredError::NonFinite(format!(
                    "gradient of parameter group {name}"
                )));
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let scale = match clip_norm {
        Some(c) if sq.sqrt() > c => c / sq.sqrt(),
        _ => 1.0,
    };
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if g.shape() != p.shape() {
            return Err(VredError::shape("adam_step", g.shape(), p.shape()));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gi = gi * scale;
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
        }
        if !p.is_finite() {
            return Err(VredError::NonFinite(format!(
                "parameter group {} after update",
                names[i]
            )));
        }
    }
    Ok(())
}
