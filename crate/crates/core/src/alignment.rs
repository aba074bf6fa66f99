//! Layer grouping and shared-parameter alignment across a model pool.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{check_layer_order, matches_prefix, Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("layer_order does not match tensor names: {0}")]
    LayerOrder(String),
    #[error("empty model pool")]
    EmptyPool,
    #[error("anchor index {anchor} out of range for {models} models")]
    AnchorOutOfRange { anchor: usize, models: usize },
    #[error("no shared parameters across the {0} models")]
    NoSharedParameters(usize),
}

impl From<CheckpointError> for AlignmentError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::LayerOrder(msg) => AlignmentError::LayerOrder(msg),
            other => AlignmentError::LayerOrder(other.to_string()),
        }
    }
}

/// Role of a tensor inside its layer, inferred from the name suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    BnMean,
    BnVar,
    Other,
}

impl TensorKind {
    pub const ALL: [TensorKind; 5] = [
        TensorKind::Weight,
        TensorKind::Bias,
        TensorKind::BnMean,
        TensorKind::BnVar,
        TensorKind::Other,
    ];

    pub fn classify(name: &str) -> Self {
        let suffix = name.rsplit('.').next().unwrap_or(name);
        if !name.contains('.') {
            return TensorKind::Other;
        }
        match suffix {
            "weight" => TensorKind::Weight,
            "bias" => TensorKind::Bias,
            "running_mean" => TensorKind::BnMean,
            "running_var" => TensorKind::BnVar,
            _ => TensorKind::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Weight => "weight",
            TensorKind::Bias => "bias",
            TensorKind::BnMean => "bn_mean",
            TensorKind::BnVar => "bn_var",
            TensorKind::Other => "other",
        }
    }

    /// Batch-norm running statistics carry no gradient.
    pub fn is_running_statistic(self) -> bool {
        matches!(self, TensorKind::BnMean | TensorKind::BnVar)
    }
}

/// A depth-indexed set of tensors sharing a name prefix. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerGroup {
    pub prefix: String,
    pub index: usize,
    pub members: Vec<(String, TensorKind)>,
}

fn default_prefix(name: &str) -> &str {
    name.rfind('.').map_or(name, |pos| &name[..pos])
}

/// Partitions the tensors of `ckpt` into layer groups.
///
/// An explicit `layer_order` metadata entry fixes the groups and their order.
/// Otherwise a tensor's group is its name up to the last dot, ordered by
/// first appearance.
pub fn group_layers(ckpt: &Checkpoint) -> Result<Vec<LayerGroup>, AlignmentError> {
    let names = || ckpt.tensors().iter().map(|t| t.name());
    let mut groups: Vec<LayerGroup> = match ckpt.layer_order()? {
        Some(order) => {
            check_layer_order(&order, names())?;
            let mut groups: Vec<LayerGroup> = order
                .into_iter()
                .map(|prefix| LayerGroup {
                    prefix,
                    index: 0,
                    members: Vec::new(),
                })
                .collect();
            for name in names() {
                let g = groups
                    .iter_mut()
                    .find(|g| matches_prefix(name, &g.prefix))
                    .expect("layer order checked");
                g.members.push((name.to_string(), TensorKind::classify(name)));
            }
            groups
        }
        None => {
            let mut groups: Vec<LayerGroup> = Vec::new();
            let mut slot: HashMap<&str, usize> = HashMap::new();
            for name in names() {
                let prefix = default_prefix(name);
                let idx = *slot.entry(prefix).or_insert_with(|| {
                    groups.push(LayerGroup {
                        prefix: prefix.to_string(),
                        index: 0,
                        members: Vec::new(),
                    });
                    groups.len() - 1
                });
                groups[idx]
                    .members
                    .push((name.to_string(), TensorKind::classify(name)));
            }
            groups
        }
    };
    for (i, g) in groups.iter_mut().enumerate() {
        g.index = i + 1;
    }
    Ok(groups)
}

/// Which tensors of the anchor take part in merging, and with what layer index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedAlignment {
    pub anchor: usize,
    pub models: usize,
    /// Shared groups in anchor order, re-indexed 1..=N_p.
    pub groups: Vec<LayerGroup>,
    /// Anchor tensors that are not merged, in anchor order.
    pub anchor_only: Vec<String>,
    /// Subset of `anchor_only` whose name exists in some other model with a
    /// different dtype or shape.
    pub conflicting: Vec<String>,
}

impl SharedAlignment {
    /// Number of shared layer groups.
    pub fn n_p(&self) -> usize {
        self.groups.len()
    }

    pub fn shared_tensor_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    /// Shared tensor names with their kind and 1-based layer index.
    pub fn shared_tensors(&self) -> impl Iterator<Item = (&str, TensorKind, usize)> {
        self.groups.iter().flat_map(|g| {
            g.members
                .iter()
                .map(move |(name, kind)| (name.as_str(), *kind, g.index))
        })
    }

    /// Maps every shared tensor name to (kind, layer index).
    pub fn lookup(&self) -> HashMap<&str, (TensorKind, usize)> {
        self.shared_tensors()
            .map(|(name, kind, j)| (name, (kind, j)))
            .collect()
    }

    /// Every model participates in every shared tensor.
    pub fn participants(&self) -> std::ops::Range<usize> {
        0..self.models
    }
}

/// Computes the set of layer groups shared by every checkpoint in the pool.
///
/// A tensor is shared when every model holds a tensor with the same name,
/// dtype and shape. A group is shared only when all of its members are.
pub fn shared_parameters(
    ckpts: &[Checkpoint],
    anchor: usize,
) -> Result<SharedAlignment, AlignmentError> {
    if ckpts.is_empty() {
        return Err(AlignmentError::EmptyPool);
    }
    if anchor >= ckpts.len() {
        return Err(AlignmentError::AnchorOutOfRange {
            anchor,
            models: ckpts.len(),
        });
    }
    let anchor_ckpt = &ckpts[anchor];
    let tensor_shared = |name: &str| {
        let reference = anchor_ckpt.get(name).expect("anchor tensor");
        ckpts
            .iter()
            .all(|c| c.get(name).is_some_and(|t| t.same_layout(reference)))
    };

    let mut groups = Vec::new();
    let mut anchor_only_set = std::collections::HashSet::new();
    for group in group_layers(anchor_ckpt)? {
        if group.members.iter().all(|(name, _)| tensor_shared(name)) {
            groups.push(group);
        } else {
            anchor_only_set.extend(group.members.into_iter().map(|(name, _)| name));
        }
    }
    for (i, g) in groups.iter_mut().enumerate() {
        g.index = i + 1;
    }

    let anchor_only: Vec<String> = anchor_ckpt
        .tensors()
        .iter()
        .map(|t| t.name())
        .filter(|n| anchor_only_set.contains(*n))
        .map(str::to_string)
        .collect();
    let conflicting = anchor_only
        .iter()
        .filter(|name| {
            let reference = anchor_ckpt.get(name).expect("anchor tensor");
            ckpts
                .iter()
                .any(|c| c.get(name).is_some_and(|t| !t.same_layout(reference)))
        })
        .cloned()
        .collect();

    if ckpts.len() >= 2 && groups.is_empty() {
        return Err(AlignmentError::NoSharedParameters(ckpts.len()));
    }
    Ok(SharedAlignment {
        anchor,
        models: ckpts.len(),
        groups,
        anchor_only,
        conflicting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::TensorRecord;

    fn ckpt(spec: &[(&str, &[usize])]) -> Checkpoint {
        let mut c = Checkpoint::empty();
        for (name, shape) in spec {
            let n = shape.iter().product();
            c.push(TensorRecord::f32(*name, shape.to_vec(), vec![0.0; n]).unwrap())
                .unwrap();
        }
        c
    }

    #[test]
    fn groups_by_prefix_in_first_appearance_order() {
        let c = ckpt(&[("bb.0.weight", &[2]), ("bb.0.bias", &[2]), ("head.weight", &[2])]);
        let g = group_layers(&c).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].prefix.as_str(), g[0].index), ("bb.0", 1));
        assert_eq!((g[1].prefix.as_str(), g[1].index), ("head", 2));
        assert_eq!(g[0].members.len(), 2);
    }

    #[test]
    fn kinds_from_suffix() {
        assert_eq!(TensorKind::classify("bb.0.running_mean"), TensorKind::BnMean);
        assert_eq!(TensorKind::classify("bb.0.running_var"), TensorKind::BnVar);
        assert_eq!(TensorKind::classify("bb.0.weight"), TensorKind::Weight);
        assert_eq!(TensorKind::classify("bb.0.bias"), TensorKind::Bias);
        assert_eq!(TensorKind::classify("bb.0.num_batches_tracked"), TensorKind::Other);
        assert_eq!(TensorKind::classify("weight"), TensorKind::Other);
    }

    #[test]
    fn explicit_layer_order_wins() {
        let mut c = ckpt(&[("bb.0.weight", &[2]), ("head.weight", &[2])]);
        c.set_layer_order(&["head", "bb.0"]);
        let g = group_layers(&c).unwrap();
        assert_eq!(g[0].prefix, "head");
        assert_eq!(g[0].index, 1);
    }

    #[test]
    fn inconsistent_layer_order_lists_unmatched() {
        let mut c = ckpt(&[("bb.0.weight", &[2]), ("head.weight", &[2])]);
        // Bypass save-time validation by editing metadata directly.
        c.set_metadata("layer_order", r#"["bb.0"]"#);
        let err = group_layers(&c).unwrap_err().to_string();
        assert!(err.contains("head.weight"), "{err}");
    }

    #[test]
    fn identical_schemas_share_everything() {
        let a = ckpt(&[("bb.0.weight", &[2, 2]), ("head.weight", &[3, 2])]);
        let al = shared_parameters(&[a.clone(), a], 0).unwrap();
        assert_eq!(al.n_p(), 2);
        assert!(al.anchor_only.is_empty());
    }

    #[test]
    fn class_count_mismatch_keeps_anchor_head() {
        let anchor = ckpt(&[("bb.0.weight", &[4, 2]), ("cls.weight", &[19, 4]), ("cls.bias", &[19])]);
        let donor = ckpt(&[("bb.0.weight", &[4, 2]), ("cls.weight", &[16, 4]), ("cls.bias", &[16])]);
        let al = shared_parameters(&[anchor, donor], 0).unwrap();
        assert_eq!(al.n_p(), 1);
        assert_eq!(al.anchor_only, vec!["cls.weight", "cls.bias"]);
        assert_eq!(al.conflicting, vec!["cls.weight", "cls.bias"]);
    }

    #[test]
    fn disjoint_heads_share_backbone_only() {
        let a = ckpt(&[("bb.0.weight", &[2]), ("bb.1.weight", &[2]), ("head_a.weight", &[2])]);
        let b = ckpt(&[("bb.0.weight", &[2]), ("bb.1.weight", &[2]), ("head_b.weight", &[2])]);
        let al = shared_parameters(&[a, b], 0).unwrap();
        assert_eq!(al.n_p(), 2);
        assert_eq!(al.anchor_only, vec!["head_a.weight"]);
        assert!(al.conflicting.is_empty());
    }

    #[test]
    fn partial_group_falls_to_anchor_only() {
        let a = ckpt(&[("l.weight", &[2]), ("l.bias", &[2]), ("m.weight", &[1])]);
        let b = ckpt(&[("l.weight", &[2]), ("l.bias", &[3]), ("m.weight", &[1])]);
        let al = shared_parameters(&[a, b], 0).unwrap();
        assert_eq!(al.anchor_only, vec!["l.weight", "l.bias"]);
        assert_eq!(al.groups[0].prefix, "m");
        assert_eq!(al.groups[0].index, 1);
    }

    #[test]
    fn nothing_shared_is_an_error() {
        let a = ckpt(&[("x.weight", &[2])]);
        let b = ckpt(&[("y.weight", &[2])]);
        assert!(matches!(
            shared_parameters(&[a, b], 0),
            Err(AlignmentError::NoSharedParameters(2))
        ));
    }

    #[test]
    fn bad_anchor_rejected() {
        let a = ckpt(&[("x.weight", &[2])]);
        assert!(matches!(
            shared_parameters(&[a], 1),
            Err(AlignmentError::AnchorOutOfRange { .. })
        ));
        assert!(matches!(shared_parameters(&[], 0), Err(AlignmentError::EmptyPool)));
    }
}
