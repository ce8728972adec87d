//! Training objectives as graph builders, shared by the training loops and
//! the gradient checks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::NormStats;
use crate::error::{Result, VredError};
use crate::layers::ConvCodecVars;
use crate::vred::{LatentNoise, VredConfig, VredVars};

/// Extra reconstruction terms added to the negative ELBO.
///
/// With `σ² = p(1−p)`, the Gaussian likelihood alone rewards pushing `p_x`
/// towards 0 or 1 (shrinking σ² gains more than the squared error costs), so
/// a plain squared-error term keeps the mean honest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    /// Weight of `Σ‖x_t − p_x‖²` on normalized features.
    pub feature: f64,
    /// Weight of `Σ‖audio − deconv(denormalize(p_x))‖²` in stage 3.
    pub waveform: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            feature: 500.0,
            waveform: 500.0,
        }
    }
}

/// Scalar objective plus its diagnostics, all averaged over the batch.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub loss: Var,
    pub neg_elbo: f64,
    pub kl: f64,
    pub log_lik: f64,
    pub feature_sq_error: f64,
    pub waveform_sq_error: f64,
    /// Per-step decoder means, `[C·W x B]` each.
    pub p_x: Vec<Var>,
}

/// Stage-2 objective over a batch of window sequences (`[C·W x B]` each).
pub fn vred_objective(
    g: &mut Graph,
    vred: &VredVars,
    cfg: &VredConfig,
    x_seq: &[Var],
    weights: &ObjectiveWeights,
    noise: &mut dyn LatentNoise,
) -> Result<ObjectiveTerms> {
    let batch = x_seq
        .first()
        .map(|&x| g.value(x).cols())
        .ok_or_else(|| VredError::Contract("objective over an empty sequence".into()))?;
    let terms = vred.elbo(g, cfg, x_seq, noise)?;
    let recon = g.scale(terms.sq_error, weights.feature)?;
    let total = g.add(terms.loss, recon)?;
    let loss = g.scale(total, 1.0 / batch as f64)?;
    let b = batch as f64;
    Ok(ObjectiveTerms {
        loss,
        neg_elbo: g.value(terms.loss).item() / b,
        kl: terms.kl.iter().sum::<f64>() / b,
        log_lik: terms.log_lik.iter().sum::<f64>() / b,
        feature_sq_error: g.value(terms.sq_error).item() / b,
        waveform_sq_error: 0.0,
        p_x: terms.p_x,
    })
}

fn normalize_graph(g: &mut Graph, f: Var, norm: &NormStats, eps: f64) -> Result<Var> {
    let shifted = g.offset(f, -norm.feature_min)?;
    let u = g.scale(shifted, 1.0 / norm.range())?;
    g.clamp(u, eps, 1.0 - eps)
}

fn denormalize_graph(g: &mut Graph, u: Var, norm: &NormStats) -> Result<Var> {
    let f = g.scale(u, norm.range())?;
    g.offset(f, norm.feature_min)
}

/// `[C x F]` features to `[C·W x F/W]`, one window per column.
pub fn windows_graph(g: &mut Graph, features: Var, cfg: &VredConfig) -> Result<Var> {
    let (c, f) = (g.shape(features)[0], g.shape(features)[1]);
    let w = cfg.window_frames;
    if c != cfg.channels || f % w != 0 {
        return Err(VredError::shape(
            "windows",
            g.shape(features),
            &[cfg.channels, w],
        ));
    }
    let t = g.transpose(features)?;
    let r = g.reshape(t, &[f / w, w * c])?;
    g.transpose(r)
}

/// Inverse of [`windows_graph`].
pub fn features_graph(g: &mut Graph, windows: Var, cfg: &VredConfig) -> Result<Var> {
    let steps = g.shape(windows)[1];
    let t = g.transpose(windows)?;
    let r = g.reshape(t, &[steps * cfg.window_frames, cfg.channels])?;
    g.transpose(r)
}

/// Stage-3 objective: conv front end, normalization, VRED and deconv back
/// end in one graph, over a batch of `[1 x T·W·S]` audio excerpts.
#[allow(clippy::too_many_arguments)]
pub fn end_to_end_objective(
    g: &mut Graph,
    codec: &ConvCodecVars,
    vred: &VredVars,
    cfg: &VredConfig,
    norm: &NormStats,
    excerpts: &[Var],
    weights: &ObjectiveWeights,
    noise: &mut dyn LatentNoise,
) -> Result<ObjectiveTerms> {
    if excerpts.is_empty() {
        return Err(VredError::Contract("objective over an empty batch".into()));
    }
    let mut per_excerpt = Vec::with_capacity(excerpts.len());
    for &a in excerpts {
        let f = codec.encode(g, a)?;
        let u = normalize_graph(g, f, norm, cfg.prob_clamp)?;
        per_excerpt.push(windows_graph(g, u, cfg)?);
    }
    let steps = g.shape(per_excerpt[0])[1];
    if per_excerpt.iter().any(|&w| g.shape(w)[1] != steps) {
        return Err(VredError::Contract(
            "excerpts of unequal length in one batch".into(),
        ));
    }
    let mut x_seq = Vec::with_capacity(steps);
    for t in 0..steps {
        let cols = per_excerpt
            .iter()
            .map(|&w| g.column(w, t))
            .collect::<Result<Vec<_>>>()?;
        x_seq.push(g.stack_columns(&cols)?);
    }
    let mut terms = vred_objective(g, vred, cfg, &x_seq, weights, noise)?;
    let batch = excerpts.len();
    let p_x = terms.p_x.clone();
    let mut wave_errors = Vec::with_capacity(batch);
    for (b, &a) in excerpts.iter().enumerate() {
        let cols = p_x
            .iter()
            .map(|&p| g.column(p, b))
            .collect::<Result<Vec<_>>>()?;
        let windows = g.stack_columns(&cols)?;
        let u = features_graph(g, windows, cfg)?;
        let f = denormalize_graph(g, u, norm)?;
        let y = codec.decode(g, f)?;
        let d = g.sub(a, y)?;
        let d2 = g.square(d)?;
        wave_errors.push(g.sum(d2)?);
    }
    let all = g.concat(&wave_errors)?;
    let wave = g.sum(all)?;
    terms.waveform_sq_error = g.value(wave).item() / batch as f64;
    let wave = g.scale(wave, weights.waveform / batch as f64)?;
    terms.loss = g.add(terms.loss, wave)?;
    Ok(terms)
}
