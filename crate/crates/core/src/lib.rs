//! Checkpoint merging toolkit.
//!
//! * [`checkpoint`] reads and writes the binary tensor format.
//! * [`alignment`] groups tensors into layers and finds the parameters a pool shares.
//! * [`merge`] builds layer-wise schedules and runs the layer-wise, isotropic,
//!   score-weighted and Fisher-weighted merges.
//! * [`discrepancy`] counts parameters that drift past a relative threshold.
//! * [`toy`] is a small MLP testbed for exercising all of the above end to end.

pub mod alignment;
pub mod checkpoint;
pub mod discrepancy;
pub mod merge;
pub mod toy;

pub use alignment::{group_layers, shared_parameters, AlignmentError, LayerGroup, SharedAlignment, TensorKind};
pub use checkpoint::{inspect, load, save, Checkpoint, CheckpointError, CheckpointSummary, DType, TensorData, TensorRecord};
pub use discrepancy::{discrepancy_profile, emit_profile, DiscrepancyProfile, ProfileFormat, ThresholdMode};
pub use merge::{
    compute_schedule, fisher_merge, isotropic_merge, layerwise_merge, scalar_weighted_merge, FisherWeights,
    MergeError, MergeSchedule, ScheduleParams,
};
