//! Synthetic Gaussian-blob domains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Standard deviation of every class blob.
pub const BLOB_SIGMA: f64 = 0.3;

/// Rigid transform mapping the source domain onto the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DomainShift {
    /// Rotation about the origin, radians.
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl DomainShift {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub inputs: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub shift: DomainShift,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Subset with the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> ToyDataset {
        ToyDataset {
            inputs: idx.iter().map(|&i| self.inputs[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

/// Mean of class `k` out of `classes`, evenly spaced on the unit circle.
pub fn class_mean(k: usize, classes: usize) -> [f64; 2] {
    let angle = std::f64::consts::TAU * k as f64 / classes as f64;
    [angle.cos(), angle.sin()]
}

/// Draws `n` points with round-robin labels, then maps them through `shift`.
pub fn sample_domain(
    seed: u64,
    n: usize,
    classes: usize,
    shift: DomainShift,
) -> Result<ToyDataset, HarnessError> {
    if classes < 2 || n < classes {
        return Err(HarnessError::InvalidConfig(format!(
            "need n >= K >= 2, got n = {n}, K = {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let mean = class_mean(y, classes);
        let dx: f64 = StandardNormal.sample(&mut rng);
        let dy: f64 = StandardNormal.sample(&mut rng);
        inputs.push(shift.apply([mean[0] + BLOB_SIGMA * dx, mean[1] + BLOB_SIGMA * dy]));
        labels.push(y);
    }
    Ok(ToyDataset {
        inputs,
        labels,
        classes,
        seed,
        shift,
    })
}

/// Source domain from `seed`, target domain (shifted) from `seed + 1`.
pub fn make_domain_pair(
    seed: u64,
    n: usize,
    classes: usize,
    shift: DomainShift,
) -> Result<(ToyDataset, ToyDataset), HarnessError> {
    let source = sample_domain(seed, n, classes, DomainShift::default())?;
    let target = sample_domain(seed.wrapping_add(1), n, classes, shift)?;
    Ok((source, target))
}
