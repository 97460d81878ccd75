use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, csv_bytes, RunConfig};
use crate::error::{Error, Result};
use crate::sensitivity::SensitivityRecord;
use crate::train::{EpochMetrics, RunOutcome};

/// A finished run: the config as given plus everything it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub param_count: usize,
    pub outcome: RunOutcome,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// `epoch,train_loss,reg_loss,val_acc,gamma,bits_l0,…,bits_l{layers-1}`.
pub fn metrics_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "train_loss", "reg_loss", "val_acc", "gamma"]
        .into_iter()
        .map(String::from)
        .collect();
    h.extend((0..layers).map(|l| format!("bits_l{l}")));
    h
}

/// Per-epoch metrics. Floats use the shortest exact decimal form, so equal
/// runs give equal bytes.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> Result<Vec<u8>> {
    let layers = metrics.first().map_or(0, |m| m.bits.len());
    csv_bytes(
        &metrics_header(layers),
        metrics.iter().map(|m| {
            let mut row = vec![
                m.epoch.to_string(),
                m.train_loss.to_string(),
                m.reg_loss.to_string(),
                m.val_acc.to_string(),
                m.gamma.to_string(),
            ];
            row.extend(m.bits.iter().map(u8::to_string));
            row
        }),
    )
}

/// Final per-layer precision: `layer,params,bits`.
pub fn scheme_csv(report: &RunReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["layer", "params", "bits"].map(String::from),
        report
            .outcome
            .scheme
            .layers
            .iter()
            .map(|e| vec![e.layer.to_string(), e.params.to_string(), e.bits.to_string()]),
    )
}

/// Sensitivities recorded at each pruning event:
/// `epoch,layer,trace,gap_sq,omega,prune_speed`.
pub fn sensitivity_csv(outcome: &RunOutcome) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for snap in &outcome.sensitivity {
        let speeds = outcome
            .schedule
            .events
            .iter()
            .find(|e| e.epoch == snap.epoch)
            .map(|e| e.prune_speeds_after.clone())
            .unwrap_or_default();
        for r in &snap.records {
            rows.push(vec![
                snap.epoch.to_string(),
                r.layer.to_string(),
                r.trace.to_string(),
                r.gap_sq.to_string(),
                r.omega.to_string(),
                speeds.get(r.layer).map_or(String::new(), u8::to_string),
            ]);
        }
    }
    csv_bytes(
        &["epoch", "layer", "trace", "gap_sq", "omega", "prune_speed"].map(String::from),
        rows,
    )
}

/// One snapshot of sensitivities: `layer,bits,trace,gap_sq,omega,prune_speed`
/// where the prune speed is the one the mean-Ω rule would assign.
pub fn hessian_csv(records: &[SensitivityRecord], bits: &[u8]) -> Result<Vec<u8>> {
    let omegas: Vec<f64> = records.iter().map(|r| r.omega).collect();
    let speeds = crate::sensitivity::assign_prune_speed(&omegas)?;
    csv_bytes(
        &["layer", "bits", "trace", "gap_sq", "omega", "prune_speed"].map(String::from),
        records.iter().zip(speeds).map(|(r, p)| {
            vec![
                r.layer.to_string(),
                bits.get(r.layer).map_or(String::new(), u8::to_string),
                r.trace.to_string(),
                r.gap_sq.to_string(),
                r.omega.to_string(),
                p.to_string(),
            ]
        }),
    )
}
