//! Random pool generators and naive scalar-loop reference implementations
//! shared by the integration suites.

#![allow(dead_code, clippy::needless_range_loop)]

use layermerge::checkpoint::{Checkpoint, DType, TensorData, TensorRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Layout of a generated pool: shared groups `g0..`, each with a weight and a
/// bias (and sometimes BN statistics), plus an anchor-only `head` group.
#[derive(Debug, Clone)]
pub struct PoolLayout {
    /// (name, shape) per shared group, in depth order.
    pub groups: Vec<Vec<(String, Vec<usize>)>>,
    pub head_rows: usize,
    pub head_cols: usize,
}

fn random_shape(rng: &mut ChaCha8Rng, max_elems: usize) -> Vec<usize> {
    // log-uniform element count keeps the average pool small
    let exp = rng.random_range(0.0..(max_elems as f64).ln());
    let target = (exp.exp() as usize).clamp(1, max_elems);
    match rng.random_range(0..3) {
        0 => vec![target],
        1 => {
            let rows = rng.random_range(1..=target.min(64));
            vec![rows, (target / rows).max(1)]
        }
        _ => vec![],
    }
}

pub fn random_layout(rng: &mut ChaCha8Rng, max_groups: usize, max_elems: usize) -> PoolLayout {
    let n_groups = rng.random_range(1..=max_groups);
    let groups = (0..n_groups)
        .map(|g| {
            let w = random_shape(rng, max_elems);
            let out = w.first().copied().unwrap_or(1);
            let mut members = vec![(format!("g{g}.weight"), w), (format!("g{g}.bias"), vec![out])];
            if rng.random_bool(0.3) {
                members.push((format!("g{g}.running_mean"), vec![out]));
                members.push((format!("g{g}.running_var"), vec![out]));
            }
            members
        })
        .collect();
    PoolLayout {
        groups,
        head_rows: rng.random_range(2..20),
        head_cols: rng.random_range(1..8),
    }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn record(name: &str, shape: &[usize], values: Vec<f64>, dtype: DType) -> TensorRecord {
    TensorRecord::new(name, shape.to_vec(), TensorData::from_f64(dtype, values)).unwrap()
}

/// One checkpoint following `layout`; `head_rows` sets the head's class count
/// and `None` omits the head.
pub fn random_checkpoint(
    rng: &mut ChaCha8Rng,
    layout: &PoolLayout,
    head_rows: Option<usize>,
    dtype: DType,
) -> Checkpoint {
    let mut c = Checkpoint::empty();
    for g in &layout.groups {
        for (name, shape) in g {
            let n = shape.iter().product();
            let scale = if name.ends_with("running_var") { 1.0 } else { 3.0 };
            let mut v = random_values(rng, n, scale);
            if name.ends_with("running_var") {
                v.iter_mut().for_each(|x| *x = x.abs() + 0.1);
            }
            c.push(record(name, shape, v, dtype)).unwrap();
        }
    }
    if let Some(rows) = head_rows {
        for (name, shape) in [
            ("head.weight", vec![rows, layout.head_cols]),
            ("head.bias", vec![rows]),
        ] {
            let n = shape.iter().product();
            c.push(record(name, &shape, random_values(rng, n, 3.0), dtype)).unwrap();
        }
    }
    c
}

/// Random non-negative Fisher tensors for every gradient-bearing tensor of
/// `layout` (and of a head with `head_rows` classes); some elements are zero.
pub fn random_fisher(rng: &mut ChaCha8Rng, layout: &PoolLayout, head_rows: Option<usize>) -> Checkpoint {
    let mut c = Checkpoint::empty();
    if let Some(rows) = head_rows {
        for (name, shape) in [("head.weight", vec![rows, layout.head_cols]), ("head.bias", vec![rows])] {
            let n = shape.iter().product();
            c.push(TensorRecord::f64(name, shape, vec![1.0; n]).unwrap()).unwrap();
        }
    }
    for g in &layout.groups {
        for (name, shape) in g {
            if name.contains("running_") {
                continue;
            }
            let n = shape.iter().product();
            let v = (0..n)
                .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..2.0) })
                .collect();
            c.push(TensorRecord::f64(name.clone(), shape.clone(), v).unwrap()).unwrap();
        }
    }
    c
}

pub fn values(c: &Checkpoint, name: &str) -> Vec<f64> {
    c.get(name).unwrap().data().to_f64_vec()
}

/// Layer-wise weight of model `i` at layer `j`, straight from the formula.
pub fn reference_weight(models: usize, n_p: usize, anchor: usize, i: usize, j: usize) -> f64 {
    let non_anchor = (n_p - j) as f64 / (n_p * models) as f64;
    if i == anchor {
        1.0 - (models - 1) as f64 * non_anchor
    } else {
        non_anchor
    }
}

/// Naive layer-wise merge of shared group `j` tensors: nested scalar loops.
pub fn reference_layerwise(pool: &[Checkpoint], anchor: usize, layout: &PoolLayout) -> Vec<(String, Vec<f64>)> {
    let m = pool.len();
    let n_p = layout.groups.len();
    let mut out = Vec::new();
    for (g, members) in layout.groups.iter().enumerate() {
        let j = g + 1;
        for (name, _) in members {
            let inputs: Vec<Vec<f64>> = pool.iter().map(|c| values(c, name)).collect();
            let mut merged = vec![0.0; inputs[0].len()];
            for k in 0..merged.len() {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += reference_weight(m, n_p, anchor, i, j) * inputs[i][k];
                }
                merged[k] = acc;
            }
            out.push((name.clone(), merged));
        }
    }
    out
}

pub fn reference_weighted(pool: &[Checkpoint], weights: &[f64], layout: &PoolLayout) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for members in &layout.groups {
        for (name, _) in members {
            let inputs: Vec<Vec<f64>> = pool.iter().map(|c| values(c, name)).collect();
            let merged = (0..inputs[0].len())
                .map(|k| {
                    let mut acc = 0.0;
                    for i in 0..pool.len() {
                        acc += weights[i] * inputs[i][k];
                    }
                    acc
                })
                .collect();
            out.push((name.clone(), merged));
        }
    }
    out
}

pub fn reference_fisher(pool: &[Checkpoint], fishers: &[Checkpoint], layout: &PoolLayout) -> Vec<(String, Vec<f64>)> {
    let m = pool.len();
    let mut out = Vec::new();
    for members in &layout.groups {
        for (name, _) in members {
            let inputs: Vec<Vec<f64>> = pool.iter().map(|c| values(c, name)).collect();
            let stat = name.contains("running_");
            let merged = (0..inputs[0].len())
                .map(|k| {
                    let mean = inputs.iter().map(|v| v[k]).sum::<f64>() / m as f64;
                    if stat {
                        return mean;
                    }
                    let f: Vec<f64> = fishers.iter().map(|fc| values(fc, name)[k]).collect();
                    let den: f64 = f.iter().sum();
                    if den == 0.0 {
                        mean
                    } else {
                        (0..m).map(|i| f[i] * inputs[i][k]).sum::<f64>() / den
                    }
                })
                .collect();
            out.push((name.clone(), merged));
        }
    }
    out
}

pub fn max_abs_diff(merged: &Checkpoint, reference: &[(String, Vec<f64>)]) -> f64 {
    reference
        .iter()
        .flat_map(|(name, r)| {
            let got = values(merged, name);
            assert_eq!(got.len(), r.len(), "{name}");
            got.into_iter().zip(r.clone()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Brute-force elementwise discrepancy count per (layer, kind-name) bucket.
pub fn brute_force_counts(a: &Checkpoint, b: &Checkpoint, tau: f64, layout: &PoolLayout) -> Vec<(usize, String, u64, u64)> {
    let mut rows: Vec<(usize, String, u64, u64)> = Vec::new();
    for (g, members) in layout.groups.iter().enumerate() {
        for (name, _) in members {
            let kind = match name.rsplit('.').next().unwrap() {
                "weight" => "weight",
                "bias" => "bias",
                "running_mean" => "bn_mean",
                "running_var" => "bn_var",
                _ => "other",
            };
            let (va, vb) = (values(a, name), values(b, name));
            let mut exceed = 0;
            for k in 0..va.len() {
                let d = (va[k] - vb[k]).abs();
                if d != 0.0 && d >= va[k].abs() / tau {
                    exceed += 1;
                }
            }
            match rows.iter_mut().find(|r| r.0 == g + 1 && r.1 == kind) {
                Some(r) => {
                    r.2 += exceed;
                    r.3 += va.len() as u64;
                }
                None => rows.push((g + 1, kind.to_string(), exceed, va.len() as u64)),
            }
        }
    }
    rows
}
