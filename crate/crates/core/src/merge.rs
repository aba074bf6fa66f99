//! Merge schedules and the four merge strategies.
//!
//! Every strategy combines only the shared tensors of a [`SharedAlignment`]
//! and copies the remaining anchor tensors verbatim. Accumulation is done in
//! f64 in model-index order; results are cast back to the anchor's dtype.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::alignment::{SharedAlignment, TensorKind};
use crate::checkpoint::{Checkpoint, CheckpointError, TensorData, TensorRecord, MODEL_ID_KEY, PERFORMANCE_KEY};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("pool has {found} checkpoints but {expected} were expected")]
    PoolSize { expected: usize, found: usize },
    #[error("schedule anchor {schedule} differs from alignment anchor {alignment}")]
    AnchorMismatch { schedule: usize, alignment: usize },
    #[error("tensor `{tensor}` missing or mis-shaped in model {model}")]
    ShapeMismatch { tensor: String, model: usize },
    #[error("tensor `{tensor}` of model {model} contains NaN or infinite values")]
    NonFinite { tensor: String, model: usize },
    #[error("tensor `{tensor}` has no shared layout across the pool; only layer-wise merging keeps it from the anchor")]
    Conflict { tensor: String },
    #[error("invalid performance scores: {0}")]
    InvalidScores(String),
    #[error("fisher weights: {0}")]
    Fisher(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = MergeError> = std::result::Result<T, E>;

/// Plateau end and first-layer weight of the layer-wise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleParams {
    /// Last layer (1-based) that keeps the first-layer weight.
    pub start: usize,
    /// Per-non-anchor weight on layers `1..=start`; `None` means
    /// `(N_p - 1) / (N_p * M)`.
    pub w0: Option<f64>,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { start: 1, w0: None }
    }
}

/// Per-model, per-layer merge weights. `weights[i][j - 1]` is the weight of
/// model `i` at shared layer `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeSchedule {
    pub models: usize,
    pub n_p: usize,
    pub anchor: usize,
    pub start: usize,
    pub w0: f64,
    pub weights: Vec<Vec<f64>>,
}

impl MergeSchedule {
    pub fn weight(&self, model: usize, layer: usize) -> f64 {
        self.weights[model][layer - 1]
    }

    /// Weight of the non-anchor models at each layer (all non-anchors share it).
    pub fn non_anchor_weights(&self) -> Option<&[f64]> {
        (0..self.models)
            .find(|&i| i != self.anchor)
            .map(|i| self.weights[i].as_slice())
    }

    pub fn anchor_weights(&self) -> &[f64] {
        &self.weights[self.anchor]
    }

    /// Constant `1/M` weights for every model at every layer.
    pub fn uniform(models: usize, n_p: usize, anchor: usize) -> Result<Self> {
        check_dims(models, n_p, anchor)?;
        let w = 1.0 / models as f64;
        Ok(Self {
            models,
            n_p,
            anchor,
            start: n_p,
            w0: w,
            weights: vec![vec![w; n_p]; models],
        })
    }
}

fn check_dims(models: usize, n_p: usize, anchor: usize) -> Result<()> {
    if models == 0 {
        return Err(MergeError::InvalidSchedule("model count must be at least 1".into()));
    }
    if n_p == 0 {
        return Err(MergeError::InvalidSchedule("shared layer count must be at least 1".into()));
    }
    if anchor >= models {
        return Err(MergeError::InvalidSchedule(format!(
            "anchor {anchor} out of range for {models} models"
        )));
    }
    Ok(())
}

/// Builds the layer-wise schedule.
///
/// Non-anchor models get `w0` on layers `1..=s`, then a linear decay
/// `w0 * (N_p - j) / (N_p - s)` reaching zero at layer `N_p`. The anchor takes
/// the remaining mass. With default parameters this is
/// `H_i(j) = (N_p - j) / (N_p * M)` for every non-anchor `i`.
pub fn compute_schedule(
    models: usize,
    n_p: usize,
    anchor: usize,
    params: ScheduleParams,
) -> Result<MergeSchedule> {
    check_dims(models, n_p, anchor)?;
    let ScheduleParams { start, w0 } = params;
    if start < 1 || start > n_p {
        return Err(MergeError::InvalidSchedule(format!(
            "start layer {start} outside 1..={n_p}"
        )));
    }
    let m = models as f64;
    let default_w0 = (n_p - 1) as f64 / (n_p * models) as f64;
    let w0_value = match w0 {
        None => default_w0,
        Some(w) => {
            if !w.is_finite() || w < 0.0 {
                return Err(MergeError::InvalidSchedule(format!("w0 = {w} must be >= 0")));
            }
            if w > 1.0 / m {
                return Err(MergeError::InvalidSchedule(format!(
                    "w0 = {w} exceeds 1/M = {}; the anchor would no longer dominate",
                    1.0 / m
                )));
            }
            if models > 1 && w == 1.0 / m {
                log::warn!("w0 = 1/M gives non-anchor models the same first-layer weight as the anchor");
            }
            w
        }
    };

    let exact_default = w0.is_none() && start == 1;
    let non_anchor: Vec<f64> = (1..=n_p)
        .map(|j| {
            if j == n_p {
                0.0
            } else if exact_default {
                (n_p - j) as f64 / (n_p * models) as f64
            } else if j <= start {
                w0_value
            } else {
                w0_value * (n_p - j) as f64 / (n_p - start) as f64
            }
        })
        .collect();
    let anchor_row: Vec<f64> = (1..=n_p)
        .map(|j| {
            if exact_default {
                // 1 - (M-1)(N_p-j)/(N_p M), as one correctly rounded quotient
                let den = n_p * models;
                (den - (models - 1) * (n_p - j)) as f64 / den as f64
            } else {
                1.0 - (m - 1.0) * non_anchor[j - 1]
            }
        })
        .collect();

    let weights = (0..models)
        .map(|i| if i == anchor { anchor_row.clone() } else { non_anchor.clone() })
        .collect();
    Ok(MergeSchedule {
        models,
        n_p,
        anchor,
        start,
        w0: w0_value,
        weights,
    })
}

/// Per-element, non-negative importance weights aligned with one model's
/// gradient-bearing tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherWeights {
    inner: Checkpoint,
}

impl FisherWeights {
    /// Rejects negative or non-finite elements.
    pub fn new(inner: Checkpoint) -> Result<Self> {
        for t in inner.tensors() {
            let values = t.data().to_f64_vec();
            if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(MergeError::Fisher(format!(
                    "tensor `{}` has invalid element {v}; Fisher values must be finite and >= 0",
                    t.name()
                )));
            }
        }
        Ok(Self { inner })
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.inner.get(name)
    }

    pub fn as_checkpoint(&self) -> &Checkpoint {
        &self.inner
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.inner
    }
}

fn check_pool(ckpts: &[Checkpoint], alignment: &SharedAlignment) -> Result<()> {
    if ckpts.len() != alignment.models {
        return Err(MergeError::PoolSize {
            expected: alignment.models,
            found: ckpts.len(),
        });
    }
    let anchor = &ckpts[alignment.anchor];
    for (name, _, _) in alignment.shared_tensors() {
        let reference = anchor.get(name).ok_or_else(|| MergeError::ShapeMismatch {
            tensor: name.to_string(),
            model: alignment.anchor,
        })?;
        for (i, c) in ckpts.iter().enumerate() {
            let t = c
                .get(name)
                .filter(|t| t.same_layout(reference))
                .ok_or_else(|| MergeError::ShapeMismatch {
                    tensor: name.to_string(),
                    model: i,
                })?;
            if !t.is_finite() {
                return Err(MergeError::NonFinite {
                    tensor: name.to_string(),
                    model: i,
                });
            }
        }
    }
    for name in &alignment.anchor_only {
        let t = anchor.get(name).ok_or_else(|| MergeError::ShapeMismatch {
            tensor: name.clone(),
            model: alignment.anchor,
        })?;
        if !t.is_finite() {
            return Err(MergeError::NonFinite {
                tensor: name.clone(),
                model: alignment.anchor,
            });
        }
    }
    Ok(())
}

fn reject_conflicts(alignment: &SharedAlignment) -> Result<()> {
    match alignment.conflicting.first() {
        Some(name) => Err(MergeError::Conflict {
            tensor: name.clone(),
        }),
        None => Ok(()),
    }
}

/// Walks the anchor's tensors, merging shared ones with `combine` and copying
/// the rest. `combine` receives the tensor name, kind, layer index and the
/// per-model inputs in model order, and returns f64 values.
fn assemble<F>(
    ckpts: &[Checkpoint],
    alignment: &SharedAlignment,
    strategy: &str,
    combine: F,
) -> Result<Checkpoint>
where
    F: Fn(&str, TensorKind, usize, &[&TensorData]) -> Result<Vec<f64>> + Sync,
{
    let lookup = alignment.lookup();
    let anchor = &ckpts[alignment.anchor];
    let tensors = anchor
        .tensors()
        .par_iter()
        .map(|t| match lookup.get(t.name()) {
            None => Ok(t.clone()),
            Some(&(kind, j)) => {
                let inputs: Vec<&TensorData> = ckpts
                    .iter()
                    .map(|c| c.get(t.name()).expect("pool checked").data())
                    .collect();
                let values = combine(t.name(), kind, j, &inputs)?;
                Ok(TensorRecord::new(
                    t.name(),
                    t.shape().to_vec(),
                    TensorData::from_f64(t.dtype(), values),
                )?)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut metadata: BTreeMap<String, String> = anchor.metadata().clone();
    metadata.remove(PERFORMANCE_KEY);
    metadata.insert(MODEL_ID_KEY.into(), "merged".into());
    metadata.insert("merge_strategy".into(), strategy.into());
    metadata.insert("merge_anchor".into(), alignment.anchor.to_string());
    metadata.insert("merge_models".into(), alignment.models.to_string());
    metadata.insert("merge_shared_layers".into(), alignment.n_p().to_string());
    Ok(Checkpoint::new(tensors, metadata)?)
}

/// θ_a + Σ_{i≠a} w_i (θ_i − θ_a), which equals Σ_i w_i θ_i when the weights
/// sum to one. Identical inputs come back bit-exact, and so does the anchor
/// wherever the other weights vanish.
fn anchored_sum(inputs: &[&TensorData], weights: &[f64], anchor: usize) -> Vec<f64> {
    let n = inputs[0].len();
    (0..n)
        .map(|k| {
            let base = inputs[anchor].get_f64(k);
            let delta = inputs
                .iter()
                .zip(weights)
                .enumerate()
                .filter(|(i, _)| *i != anchor)
                .fold(0.0, |acc, (_, (x, w))| acc + w * (x.get_f64(k) - base));
            base + delta
        })
        .collect()
}

/// (Σ_i r_i θ_i) / Σ_i r_i for positive relative weights.
fn ratio_sum(inputs: &[&TensorData], rel: &[f64]) -> Vec<f64> {
    let total: f64 = rel.iter().sum();
    let n = inputs[0].len();
    (0..n)
        .map(|k| {
            inputs
                .iter()
                .zip(rel)
                .fold(0.0, |acc, (x, r)| acc + r * x.get_f64(k))
                / total
        })
        .collect()
}

fn plain_mean(inputs: &[&TensorData]) -> Vec<f64> {
    ratio_sum(inputs, &vec![1.0; inputs.len()])
}

/// Layer-wise merge: shared layer `j` becomes Σ_i H_i(j) θ_i; everything else
/// is copied from the anchor.
pub fn layerwise_merge(
    ckpts: &[Checkpoint],
    schedule: &MergeSchedule,
    alignment: &SharedAlignment,
) -> Result<Checkpoint> {
    check_pool(ckpts, alignment)?;
    if schedule.models != ckpts.len() {
        return Err(MergeError::PoolSize {
            expected: schedule.models,
            found: ckpts.len(),
        });
    }
    if schedule.anchor != alignment.anchor {
        return Err(MergeError::AnchorMismatch {
            schedule: schedule.anchor,
            alignment: alignment.anchor,
        });
    }
    if schedule.n_p != alignment.n_p() {
        return Err(MergeError::InvalidSchedule(format!(
            "schedule covers {} layers but the pool shares {}",
            schedule.n_p,
            alignment.n_p()
        )));
    }
    let columns: Vec<Vec<f64>> = (1..=schedule.n_p)
        .map(|j| (0..schedule.models).map(|i| schedule.weight(i, j)).collect())
        .collect();
    let mut out = assemble(ckpts, alignment, "layerwise", |_, _, j, inputs| {
        Ok(anchored_sum(inputs, &columns[j - 1], schedule.anchor))
    })?;
    out.set_metadata("merge_start_layer", schedule.start.to_string());
    out.set_metadata("merge_w0", schedule.w0.to_string());
    Ok(out)
}

/// Arithmetic mean of every shared tensor.
pub fn isotropic_merge(ckpts: &[Checkpoint], alignment: &SharedAlignment) -> Result<Checkpoint> {
    check_pool(ckpts, alignment)?;
    reject_conflicts(alignment)?;
    assemble(ckpts, alignment, "isotropic", |_, _, _, inputs| Ok(plain_mean(inputs)))
}

/// Normalized merge weights `perf_i / Σ perf`.
pub fn score_weights(perf: &[f64]) -> Result<Vec<f64>> {
    validate_scores(perf)?;
    let total: f64 = perf.iter().sum();
    Ok(perf.iter().map(|p| p / total).collect())
}

fn validate_scores(perf: &[f64]) -> Result<()> {
    if perf.is_empty() {
        return Err(MergeError::InvalidScores("no scores given".into()));
    }
    if let Some(p) = perf.iter().find(|p| !p.is_finite() || **p <= 0.0) {
        return Err(MergeError::InvalidScores(format!("score {p} is not a positive number")));
    }
    Ok(())
}

/// Performance-weighted mean with weights `perf_i / Σ perf`.
pub fn scalar_weighted_merge(
    ckpts: &[Checkpoint],
    perf: &[f64],
    alignment: &SharedAlignment,
) -> Result<Checkpoint> {
    check_pool(ckpts, alignment)?;
    reject_conflicts(alignment)?;
    if perf.len() != ckpts.len() {
        return Err(MergeError::InvalidScores(format!(
            "{} scores for {} models",
            perf.len(),
            ckpts.len()
        )));
    }
    validate_scores(perf)?;
    // Scaling by the largest score keeps equal scores at exactly 1.0, so the
    // result coincides bit-for-bit with the isotropic mean.
    let max = perf.iter().cloned().fold(f64::MIN, f64::max);
    let rel: Vec<f64> = perf.iter().map(|p| p / max).collect();
    let mut out = assemble(ckpts, alignment, "scalar", |_, _, _, inputs| Ok(ratio_sum(inputs, &rel)))?;
    let weights = score_weights(perf)?;
    out.set_metadata(
        "merge_weights",
        serde_json::to_string(&weights).expect("f64 list serializes"),
    );
    Ok(out)
}

/// Per-element Fisher-weighted mean. Running statistics are averaged plainly,
/// and elements whose Fisher mass is zero in every model fall back to the mean.
pub fn fisher_merge(
    ckpts: &[Checkpoint],
    fishers: &[FisherWeights],
    alignment: &SharedAlignment,
) -> Result<Checkpoint> {
    check_pool(ckpts, alignment)?;
    reject_conflicts(alignment)?;
    if fishers.len() != ckpts.len() {
        return Err(MergeError::Fisher(format!(
            "{} Fisher sets for {} models",
            fishers.len(),
            ckpts.len()
        )));
    }
    for (name, kind, _) in alignment.shared_tensors() {
        if kind.is_running_statistic() {
            continue;
        }
        let shape = ckpts[alignment.anchor].get(name).expect("pool checked").shape();
        for (i, f) in fishers.iter().enumerate() {
            match f.get(name) {
                None => {
                    return Err(MergeError::Fisher(format!(
                        "model {i} has no Fisher tensor for `{name}`"
                    )))
                }
                Some(t) if t.shape() != shape => {
                    return Err(MergeError::Fisher(format!(
                        "model {i}: Fisher tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
    }

    assemble(ckpts, alignment, "fisher", |name, kind, _, inputs| {
        if kind.is_running_statistic() {
            return Ok(plain_mean(inputs));
        }
        let f: Vec<&TensorData> = fishers
            .iter()
            .map(|fw| fw.get(name).expect("fisher checked").data())
            .collect();
        let m = inputs.len() as f64;
        Ok((0..inputs[0].len())
            .map(|k| {
                let mut num = 0.0;
                let mut den = 0.0;
                let mut plain = 0.0;
                for (x, fi) in inputs.iter().zip(&f) {
                    let (x, w) = (x.get_f64(k), fi.get_f64(k));
                    num += w * x;
                    den += w;
                    plain += x;
                }
                if den > 0.0 {
                    num / den
                } else {
                    plain / m
                }
            })
            .collect())
    })
}
