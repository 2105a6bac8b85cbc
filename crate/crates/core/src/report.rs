//! Machine-readable run reporting.

use serde::{Deserialize, Serialize};

/// How many patches survived each stage of a run. Attached to pipeline
/// failures so callers can see where candidates were lost.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub lidar_patches: usize,
    pub visual_patches: usize,
    pub salient_patches: usize,
    /// Candidate pairs after annulus + angle selection, summed over patches.
    pub annulus_candidates: usize,
    pub after_descriptor_filter: usize,
    pub after_neighbor_filter: usize,
    /// Salient patches that produced a converged 2D registration.
    pub registered_2d: usize,
    /// Patch transforms accepted into the result set.
    pub accepted: usize,
}

/// Per-stage wall-clock timings in milliseconds.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub downsample_ms: f64,
    pub partition_ms: f64,
    pub descriptors_ms: f64,
    pub candidate_selection_ms: f64,
    pub patch_registration_ms: f64,
    pub fusion_ms: f64,
    pub refinement_ms: f64,
    pub total_ms: f64,
}

/// Full run report emitted next to the registration outputs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub counts: StageCounts,
    pub timings: StageTimings,
    /// Cluster sizes found during fusion, largest first.
    pub cluster_sizes: Vec<usize>,
    /// Whether the final whole-cloud refinement converged (falls back to the
    /// fused transform when it does not).
    pub refinement_converged: bool,
    pub seed: u64,
    pub workers: usize,
}
