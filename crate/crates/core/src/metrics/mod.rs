//! Evaluation metrics for the four open-world segmentation tasks: pixel- and
//! component-level anomaly metrics, open-world confusion / mIoU /
//! homogeneity / completeness, and open-set / open-world panoptic quality.
//!
//! Per-image evidence lives in mergeable accumulators (`ComponentTally`,
//! `OpenWorldConfusion`, `PanopticTally`, and the task accumulators), so
//! datasets can be evaluated image-parallel and reduced associatively.

use std::fmt;

pub mod anomaly;
pub mod components;
pub mod confusion;
pub mod panoptic;
pub mod task;

pub use anomaly::{
    aupr, component_level, component_tally, fpr_at_95_tpr, ComponentReport, ComponentTally,
    F1_THRESHOLDS,
};
pub use components::connected_components;
pub use confusion::{
    completeness, homogeneity, ow_miou, OpenWorldConfusion, OwIouReport, PurityReport,
};
pub use panoptic::{
    finalize_ow_pq, open_set_pq, open_set_tally, open_world_pq, open_world_pq_tallies, OwPqReport,
    PanopticTally, PqReport,
};
pub use task::{
    AnomalyAccumulator, MetricReport, MetricValue, OsPanopticAccumulator, OwPanopticAccumulator,
    OwSemanticAccumulator, TaskKind,
};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    ShapeMismatch,
    /// AUPR/FPR95 need at least one positive and one negative pixel.
    DegenerateLabels,
    NonFinite,
    LabelOutOfRange {
        label: u32,
        bound: usize,
    },
    InconsistentPanoptic {
        instance: u32,
    },
    BadScoreMap {
        dim: usize,
    },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch => write!(f, "raster shapes do not match"),
            MetricsError::DegenerateLabels => {
                write!(f, "need at least one positive and one negative pixel")
            }
            MetricsError::NonFinite => write!(f, "non-finite score"),
            MetricsError::LabelOutOfRange { label, bound } => {
                write!(f, "label {label} out of range (bound {bound})")
            }
            MetricsError::InconsistentPanoptic { instance } => {
                write!(f, "panoptic-inconsistent input (instance {instance})")
            }
            MetricsError::BadScoreMap { dim } => {
                write!(f, "anomaly score map must have dim 1, got {dim}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}
