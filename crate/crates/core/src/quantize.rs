//! Integer code mapping, the RoundClamp and DoReFa quantizers, bipartite LSB
//! slicing, and the straight-through forward/backward contract.
//!
//! Weights live in two coordinate systems. The *latent* value is the
//! unconstrained trained parameter. The *normalized* value `u ∈ [0, 1]` is the
//! latent mapped affinely through a fixed per-layer scale `s`:
//!
//! ```text
//! u = clamp(latent / (2s) + 0.5, 0, 1)        latent = 2s (u − 0.5)
//! ```
//!
//! Codes are computed on `u`. An `n`-bit code splits into its top `n − k`
//! bits and a `k`-bit LSB slice `code_n − 2^k · code_{n−k}`. Under RoundClamp
//! the coarse bin boundaries sit on fine bin midpoints, so the slice is a
//! signed residual in `[−2^{k−1}, 2^{k−1}]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    /// `min(round(2^m u), 2^m − 1)`.
    #[default]
    RoundClamp,
    /// `round((2^m − 1) u)`.
    DoReFa,
}

fn check_bits(m: u8) -> Result<()> {
    if (1..=MAX_BITS).contains(&m) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {m} outside [1, {MAX_BITS}]")))
    }
}

pub fn normalize(latent: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    Ok(normalize_unchecked(latent, scale))
}

#[inline]
fn normalize_unchecked(latent: f64, scale: f64) -> f64 {
    (latent / (2.0 * scale) + 0.5).clamp(0.0, 1.0)
}

#[inline]
pub fn denormalize(u: f64, scale: f64) -> f64 {
    2.0 * scale * (u - 0.5)
}

#[inline]
fn code_unchecked(u: f64, m: u8, kind: QuantizerKind) -> i64 {
    let levels = (1i64 << m) as f64;
    match kind {
        QuantizerKind::RoundClamp => ((levels * u).round() as i64).min((1i64 << m) - 1),
        QuantizerKind::DoReFa => ((levels - 1.0) * u).round() as i64,
    }
}

/// Integer code of a normalized weight at `m` bits. Ties round away from zero.
pub fn quant_code(u: f64, m: u8, kind: QuantizerKind) -> Result<i64> {
    check_bits(m)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Input(format!("normalized weight {u} outside [0, 1]")));
    }
    Ok(code_unchecked(u, m, kind))
}

/// Normalized value `code / (2^m − 1)` of an `m`-bit code.
pub fn dequantize(code: i64, m: u8) -> Result<f64> {
    check_bits(m)?;
    let top = (1i64 << m) - 1;
    if !(0..=top).contains(&code) {
        return Err(Error::Internal(format!("code {code} outside [0, {top}]")));
    }
    Ok(code as f64 / top as f64)
}

fn check_slice(n: u8, k: u8) -> Result<()> {
    check_bits(n)?;
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "LSB slice width {k} must satisfy 1 <= k < n = {n}"
        )));
    }
    Ok(())
}

#[inline]
fn lsb_code_unchecked(u: f64, n: u8, k: u8, kind: QuantizerKind) -> i64 {
    code_unchecked(u, n, kind) - (1i64 << k) * code_unchecked(u, n - k, kind)
}

/// Integer value of the `k` least significant bits of the `n`-bit code.
pub fn lsb_code(u: f64, n: u8, k: u8, kind: QuantizerKind) -> Result<i64> {
    check_slice(n, k)?;
    quant_code(u, n, kind)?;
    Ok(lsb_code_unchecked(u, n, k, kind))
}

#[inline]
fn lsb_residual_unchecked(u: f64, n: u8, k: u8) -> f64 {
    let coarse = n - k;
    u - code_unchecked(u, coarse, QuantizerKind::RoundClamp) as f64 / (1i64 << coarse) as f64
}

/// Continuous LSB residual in normalized weight units: the signed distance
/// from `u` to its nearest coarse rounding target `j / 2^{n−k}`.
///
/// It has slope one in `u` and vanishes exactly where the integer LSB code
/// does, so `sign(residual)` is a valid subgradient of `|residual|`.
pub fn lsb_residual(u: f64, n: u8, k: u8, kind: QuantizerKind) -> Result<f64> {
    if kind != QuantizerKind::RoundClamp {
        return Err(Error::UnsupportedQuantizer(
            "continuous LSB residual is defined for RoundClamp only".into(),
        ));
    }
    check_slice(n, k)?;
    quant_code(u, n, kind)?;
    Ok(lsb_residual_unchecked(u, n, k))
}

/// One-sided residual of the DoReFa grid, measured from the value of the
/// code's top `n − k` bits: `u − 2^k ⌊d_n / 2^k⌋ / (2^n − 1)`.
///
/// The truncated LSB field `d_n mod 2^k` is never negative, so an L1 pull on
/// this residual only ever points downward. Kept to reproduce that drift;
/// training never uses it.
pub fn dorefa_truncated_residual(u: f64, n: u8, k: u8) -> Result<f64> {
    check_slice(n, k)?;
    let d = quant_code(u, n, QuantizerKind::DoReFa)?;
    let msb_part = (d >> k) << k;
    Ok(u - dequantize(msb_part, n)?)
}

/// Per-layer quantization state: latent weights plus the precision bookkeeping
/// the pruning schedule mutates between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantState {
    pub latent: Tensor,
    bits: u8,
    prune_speed: u8,
    scale: f64,
    kind: QuantizerKind,
    pinned: bool,
}

/// Quantized weights together with the STE pass-through mask (1 where the
/// latent weight sits inside the scale range, 0 where normalization clamped).
#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    pub values: Tensor,
    pub pass: Tensor,
}

impl QuantizedWeights {
    /// STE backward: gradient w.r.t. the latent weights given the gradient
    /// w.r.t. the quantized weights.
    pub fn backward(&self, grad_quantized: &Tensor) -> Result<Tensor> {
        grad_quantized.zip_map(&self.pass, |g, m| g * m)
    }
}

/// The `k`-bit LSB slice of every weight in a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LsbSlice {
    pub codes: Vec<i64>,
    pub residuals: Tensor,
    pub k: u8,
}

impl LayerQuantState {
    /// Wraps latent weights with a scale frozen at `max |latent|`.
    pub fn new(latent: Tensor, bits: u8, kind: QuantizerKind) -> Result<Self> {
        let scale = latent.max_abs();
        Self::with_scale(latent, scale, bits, kind)
    }

    pub fn with_scale(latent: Tensor, scale: f64, bits: u8, kind: QuantizerKind) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("layer scale must be positive, got {scale}")));
        }
        Ok(Self {
            latent,
            bits,
            prune_speed: 1,
            scale,
            kind,
            pinned: false,
        })
    }

    /// Restores a state exactly as serialized (checkpoints).
    pub fn restore(
        latent: Tensor,
        scale: f64,
        bits: u8,
        prune_speed: u8,
        kind: QuantizerKind,
        pinned: bool,
    ) -> Result<Self> {
        let mut state = Self::with_scale(latent, scale, bits, kind)?;
        state.set_prune_speed(prune_speed)?;
        state.pinned = pinned;
        Ok(state)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn prune_speed(&self) -> u8 {
        self.prune_speed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    /// Pinned layers keep their precision for the whole run.
    pub fn pinned(&self) -> bool {
        self.pinned
    }

    pub fn set_pinned(&mut self, pinned: bool) {
        self.pinned = pinned;
    }

    pub fn set_prune_speed(&mut self, p: u8) -> Result<()> {
        if !(1..=2).contains(&p) {
            return Err(Error::Config(format!("prune speed must be 1 or 2, got {p}")));
        }
        self.prune_speed = p;
        Ok(())
    }

    /// Lowers the precision by `by` bits, never below `floor`. Returns the
    /// number of bits actually removed.
    pub fn reduce_bits(&mut self, by: u8, floor: u8) -> u8 {
        let floor = floor.max(1);
        let removed = by.min(self.bits.saturating_sub(floor));
        self.bits -= removed;
        removed
    }

    /// Width of the LSB slice the regularizer acts on: the prune speed,
    /// shortened so at least one MSB remains. `None` at the 1-bit floor.
    pub fn lsb_width(&self) -> Option<u8> {
        (self.bits > 1).then(|| self.prune_speed.min(self.bits - 1))
    }

    pub fn normalized(&self) -> impl Iterator<Item = f64> + '_ {
        let s = self.scale;
        self.latent.data().iter().map(move |&w| normalize_unchecked(w, s))
    }

    /// Quantized weights in latent units and the STE pass-through mask.
    pub fn quantized_forward(&self) -> QuantizedWeights {
        let s = self.scale;
        let top = ((1i64 << self.bits) - 1) as f64;
        let mut values = Tensor::zeros(self.latent.shape());
        let mut pass = Tensor::zeros(self.latent.shape());
        for ((w, v), m) in self.latent.data().iter().zip(values.data_mut()).zip(pass.data_mut()) {
            let u = normalize_unchecked(*w, s);
            *v = denormalize(code_unchecked(u, self.bits, self.kind) as f64 / top, s);
            *m = if w.abs() <= s { 1.0 } else { 0.0 };
        }
        QuantizedWeights { values, pass }
    }

    /// LSB codes and residuals at slice width `k`.
    pub fn lsb_slice(&self, k: u8) -> Result<LsbSlice> {
        check_slice(self.bits, k)?;
        if self.kind != QuantizerKind::RoundClamp {
            return Err(Error::UnsupportedQuantizer(
                "LSB slicing requires the RoundClamp quantizer".into(),
            ));
        }
        let n = self.bits;
        let mut codes = Vec::with_capacity(self.latent.len());
        let mut residuals = Tensor::zeros(self.latent.shape());
        for (u, r) in self.normalized().zip(residuals.data_mut()) {
            codes.push(lsb_code_unchecked(u, n, k, self.kind));
            *r = lsb_residual_unchecked(u, n, k);
        }
        Ok(LsbSlice { codes, residuals, k })
    }
}

/// Uniform activation quantizer over `[0, clip]`. Returns the quantized tensor
/// and its STE mask (1 inside `[0, clip]`, 0 outside). `bits == None` is the
/// identity with an all-ones mask.
pub fn quantize_activation(x: &Tensor, bits: Option<u8>, clip: f64) -> Result<(Tensor, Tensor)> {
    let Some(bits) = bits else {
        return Ok((x.clone(), Tensor::filled(x.shape(), 1.0)));
    };
    check_bits(bits)?;
    if !(clip > 0.0) {
        return Err(Error::Config(format!("activation clip must be positive, got {clip}")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let q = x.map(|v| (v.clamp(0.0, clip) / clip * levels).round() / levels * clip);
    let mask = x.map(|v| if (0.0..=clip).contains(&v) { 1.0 } else { 0.0 });
    Ok((q, mask))
}
