//! Per-layer Hessian sensitivity and prune-speed assignment.
//!
//! Hessian-vector products are central differences of the task-loss gradient,
//! which is exact for quadratics. The Hutchinson estimator averages `vᵀHv`
//! over Rademacher probes supported on a single layer, giving that layer's
//! diagonal Hessian block trace. A layer's sensitivity is
//! `max(trace, 0) · ‖W_q − W‖²`; layers strictly below the mean sensitivity
//! shed two bits per pruning event, the rest one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rademacher, RngStream, Tensor};

pub const DEFAULT_HVP_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub layer: usize,
    pub trace: f64,
    pub gap_sq: f64,
    pub omega: f64,
}

impl SensitivityRecord {
    pub fn new(layer: usize, trace: f64, quantized: &Tensor, latent: &Tensor) -> Result<Self> {
        let gap_sq = gap_sq(quantized, latent)?;
        Ok(Self {
            layer,
            trace,
            gap_sq,
            omega: trace.max(0.0) * gap_sq,
        })
    }
}

fn gap_sq(quantized: &Tensor, latent: &Tensor) -> Result<f64> {
    quantized
        .check_same_shape(latent)
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(quantized
        .data()
        .iter()
        .zip(latent.data())
        .map(|(q, w)| (q - w) * (q - w))
        .sum())
}

/// Hessian-vector product by central differences of `grad_fn`:
/// `(g(w + h v) − g(w − h v)) / 2h` with `h = eps / ‖v‖_∞`.
pub fn hvp(mut grad_fn: impl FnMut(&Tensor) -> Result<Tensor>, w: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("hvp step must be positive, got {eps}")));
    }
    w.check_same_shape(v)?;
    let vmax = v.max_abs();
    if vmax == 0.0 {
        return Err(Error::Input("hvp direction must be nonzero".into()));
    }
    let h = eps / vmax;
    let mut probe = w.clone();
    probe.axpy(h, v)?;
    let up = grad_fn(&probe)?;
    let mut probe = w.clone();
    probe.axpy(-h, v)?;
    let down = grad_fn(&probe)?;
    let mut out = up.zip_map(&down, |a, b| a - b)?;
    out.scale(1.0 / (2.0 * h));
    Ok(out)
}

/// Individual Hutchinson samples `vᵀ H v` for `samples` Rademacher probes.
pub fn hutchinson_samples(
    mut grad_fn: impl FnMut(&Tensor) -> Result<Tensor>,
    w: &Tensor,
    samples: usize,
    rng: &mut RngStream,
    eps: f64,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::Config("Hutchinson sample count must be at least 1".into()));
    }
    (0..samples)
        .map(|_| {
            let v = rademacher(rng, w.len()).reshape(w.shape().to_vec())?;
            let hv = hvp(&mut grad_fn, w, &v, eps)?;
            v.dot(&hv)
        })
        .collect()
}

/// Hutchinson estimate of `Tr(H)` for the loss whose gradient is `grad_fn`.
pub fn hutchinson_trace(
    grad_fn: impl FnMut(&Tensor) -> Result<Tensor>,
    w: &Tensor,
    samples: usize,
    rng: &mut RngStream,
    eps: f64,
) -> Result<f64> {
    let xs = hutchinson_samples(grad_fn, w, samples, rng, eps)?;
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// `max(trace, 0) · Σ (quantized − latent)²`.
pub fn omega(trace: f64, latent: &Tensor, quantized: &Tensor) -> Result<f64> {
    Ok(trace.max(0.0) * gap_sq(quantized, latent)?)
}

/// Two bits for layers strictly below the mean sensitivity, one otherwise.
pub fn assign_prune_speed(omegas: &[f64]) -> Result<Vec<u8>> {
    if omegas.is_empty() {
        return Err(Error::Input("no sensitivities to threshold".into()));
    }
    let mean = omegas.iter().sum::<f64>() / omegas.len() as f64;
    Ok(omegas.iter().map(|&o| if o < mean { 2 } else { 1 }).collect())
}
