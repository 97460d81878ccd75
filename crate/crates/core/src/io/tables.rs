use crate::error::{Error, Result};
use crate::model::Model;
use crate::quantize::{dorefa_truncated_residual, lsb_code, lsb_residual, quant_code, QuantizerKind};

use super::csv_bytes;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerRow {
    pub u: f64,
    pub code_n: i64,
    pub code_msb: i64,
    pub lsb_code: i64,
    /// For DoReFa this is the residual against the truncated MSB code.
    pub lsb_residual: f64,
}

/// Bin map of the `n`-bit quantizer and its `k`-bit LSB slice on an even
/// grid of `points` values over `[0, 1]`.
pub fn quantizer_table(n: u8, k: u8, kind: QuantizerKind, points: usize) -> Result<Vec<QuantizerRow>> {
    if points < 2 {
        return Err(Error::Input(format!(
            "quantizer table needs at least 2 grid points, got {points}"
        )));
    }
    (0..points)
        .map(|i| {
            let u = i as f64 / (points - 1) as f64;
            let residual = match kind {
                QuantizerKind::RoundClamp => lsb_residual(u, n, k, kind)?,
                QuantizerKind::DoReFa => dorefa_truncated_residual(u, n, k)?,
            };
            Ok(QuantizerRow {
                u,
                code_n: quant_code(u, n, kind)?,
                code_msb: quant_code(u, n - k, kind)?,
                lsb_code: lsb_code(u, n, k, kind)?,
                lsb_residual: residual,
            })
        })
        .collect()
}

pub fn quantizer_table_csv(rows: &[QuantizerRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["u", "code_n", "code_n_minus_k", "lsb_code", "lsb_residual"].map(String::from),
        rows.iter().map(|r| {
            vec![
                r.u.to_string(),
                r.code_n.to_string(),
                r.code_msb.to_string(),
                r.lsb_code.to_string(),
                r.lsb_residual.to_string(),
            ]
        }),
    )
}

/// Weight distributions of every quantized layer over `bins` equal bins of
/// the normalized range: `layer,bits,bin_lo,bin_hi,latent_count,quantized_count`.
pub fn histogram_csv(model: &Model, bins: usize) -> Result<Vec<u8>> {
    if bins == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    let bin_of = |u: f64| ((u * bins as f64) as usize).min(bins - 1);
    let mut rows = Vec::new();
    for (l, q) in model.quant_layers().iter().enumerate() {
        let top = ((1i64 << q.bits()) - 1) as f64;
        let mut latent = vec![0usize; bins];
        let mut quant = vec![0usize; bins];
        for u in q.normalized() {
            latent[bin_of(u)] += 1;
            quant[bin_of(quant_code(u, q.bits(), q.kind())? as f64 / top)] += 1;
        }
        for b in 0..bins {
            rows.push(vec![
                l.to_string(),
                q.bits().to_string(),
                (b as f64 / bins as f64).to_string(),
                ((b + 1) as f64 / bins as f64).to_string(),
                latent[b].to_string(),
                quant[b].to_string(),
            ]);
        }
    }
    csv_bytes(
        &["layer", "bits", "bin_lo", "bin_hi", "latent_count", "quantized_count"].map(String::from),
        rows,
    )
}
