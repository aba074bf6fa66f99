//! Per-layer counts of parameters that moved by more than a τ-relative
//! threshold between two checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{shared_parameters, AlignmentError, TensorKind};
use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum DiscrepancyError {
    #[error("tau must be a positive finite number, got {0}")]
    InvalidTau(f64),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("tensor `{tensor}` in checkpoint {side} contains NaN or infinite values")]
    NonFinite { tensor: String, side: char },
    #[error("serialization failed: {0}")]
    Encode(String),
}

/// How the per-element threshold is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `|a_k - b_k| >= |a_k| / tau`
    #[default]
    Elementwise,
    /// `|a_k - b_k| >= ||a||_2 / (tau * sqrt(n))` over the layer's tensors of one kind.
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer_index: usize,
    pub kind: TensorKind,
    pub exceed_count: u64,
    pub total_count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyProfile {
    pub tau: f64,
    pub mode: ThresholdMode,
    pub rows: Vec<ProfileRow>,
}

impl DiscrepancyProfile {
    /// Flagged fraction over every compared element.
    pub fn total_fraction(&self) -> f64 {
        let exceed: u64 = self.rows.iter().map(|r| r.exceed_count).sum();
        let total: u64 = self.rows.iter().map(|r| r.total_count).sum();
        if total == 0 {
            0.0
        } else {
            exceed as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileFormat {
    Csv,
    Json,
}

/// An unchanged element is never flagged, even against a zero threshold.
fn flagged(diff: f64, threshold: f64) -> bool {
    diff > 0.0 && diff >= threshold
}

/// Compares `a` (the reference) against `b` over their shared layer groups.
pub fn discrepancy_profile(
    a: &Checkpoint,
    b: &Checkpoint,
    tau: f64,
    mode: ThresholdMode,
) -> Result<DiscrepancyProfile, DiscrepancyError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DiscrepancyError::InvalidTau(tau));
    }
    let pair = [a.clone(), b.clone()];
    let alignment = shared_parameters(&pair, 0)?;

    // (j, kind) -> paired values in tensor order
    let mut buckets: BTreeMap<(usize, TensorKind), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (name, kind, j) in alignment.shared_tensors() {
        let ta = a.get(name).expect("shared");
        let tb = b.get(name).expect("shared");
        for (t, side) in [(ta, 'a'), (tb, 'b')] {
            if !t.is_finite() {
                return Err(DiscrepancyError::NonFinite {
                    tensor: name.to_string(),
                    side,
                });
            }
        }
        let entry = buckets.entry((j, kind)).or_default();
        entry.0.extend(ta.data().to_f64_vec());
        entry.1.extend(tb.data().to_f64_vec());
    }

    let rows = buckets
        .into_iter()
        .map(|((layer_index, kind), (va, vb))| {
            let exceed = match mode {
                ThresholdMode::Elementwise => va
                    .iter()
                    .zip(&vb)
                    .filter(|(x, y)| flagged((*x - *y).abs(), x.abs() / tau))
                    .count(),
                ThresholdMode::LayerNorm => {
                    let norm = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let threshold = norm / (tau * (va.len() as f64).sqrt());
                    va.iter()
                        .zip(&vb)
                        .filter(|(x, y)| flagged((*x - *y).abs(), threshold))
                        .count()
                }
            } as u64;
            let total = va.len() as u64;
            ProfileRow {
                layer_index,
                kind,
                exceed_count: exceed,
                total_count: total,
                fraction: if total == 0 { 0.0 } else { exceed as f64 / total as f64 },
            }
        })
        .collect();
    Ok(DiscrepancyProfile { tau, mode, rows })
}

/// Renders the profile as CSV (`layer_index,kind,exceed_count,total_count,fraction`)
/// or as a JSON document.
pub fn emit_profile(
    profile: &DiscrepancyProfile,
    format: ProfileFormat,
) -> Result<Vec<u8>, DiscrepancyError> {
    match format {
        ProfileFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["layer_index", "kind", "exceed_count", "total_count", "fraction"])
                .map_err(|e| DiscrepancyError::Encode(e.to_string()))?;
            for r in &profile.rows {
                w.write_record([
                    r.layer_index.to_string(),
                    r.kind.as_str().to_string(),
                    r.exceed_count.to_string(),
                    r.total_count.to_string(),
                    r.fraction.to_string(),
                ])
                .map_err(|e| DiscrepancyError::Encode(e.to_string()))?;
            }
            w.into_inner()
                .map_err(|e| DiscrepancyError::Encode(e.to_string()))
        }
        ProfileFormat::Json => {
            let mut out = serde_json::to_vec_pretty(profile)
                .map_err(|e| DiscrepancyError::Encode(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}
