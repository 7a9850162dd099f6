//! Numeric core and evaluation suite for open-world panoptic segmentation.
//!
//! The crate covers the mathematical pipeline around an open-world
//! segmentation model, verified end to end on synthetic scenes:
//!
//! - [`model`]: shared raster, feature, and parameter types;
//! - [`stats`]: running class-descriptor statistics and the semantic /
//!   contrastive decoder losses;
//! - [`offset`]: instance-decoder losses over offset vector fields;
//! - [`postprocess`]: anomaly scoring, unknown decisions, incremental class
//!   discovery, offset clustering, and semantic filtering;
//! - [`metrics`]: the four-task evaluation suite (anomaly, open-world
//!   semantic, open-set panoptic, open-world panoptic);
//! - [`synth`]: deterministic synthetic scenes and brute-force metric
//!   oracles;
//! - [`io`]: mask / feature-map / descriptor-bank file formats, dataset
//!   manifests, and metric reports.
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`]
//! (`f32` or `f64`); the aliases below pin the common instantiations.

mod hdbscan;
pub mod io;
pub mod metrics;
pub mod model;
pub mod offset;
pub mod postprocess;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use model::{
    canonicalize_instances, instance_centroids, validate_pair, BinaryMask, InstanceMask,
    ModelError, SemanticMask,
};
pub use scalar::Real;

pub type FeatureMap32 = model::FeatureMap<f32>;
pub type FeatureMap64 = model::FeatureMap<f64>;
pub type OffsetField32 = model::OffsetField<f32>;
pub type OffsetField64 = model::OffsetField<f64>;
pub type LossWeights32 = model::LossWeights<f32>;
pub type LossWeights64 = model::LossWeights<f64>;
pub type SoftMask32 = offset::SoftMask<f32>;
pub type SoftMask64 = offset::SoftMask<f64>;
pub type DescriptorBank32 = stats::DescriptorBank<f32>;
pub type DescriptorBank64 = stats::DescriptorBank<f64>;
pub type ClassWeights32 = stats::ClassWeights<f32>;
pub type ClassWeights64 = stats::ClassWeights<f64>;
pub type AnomalyScores32 = postprocess::AnomalyScores<f32>;
pub type AnomalyScores64 = postprocess::AnomalyScores<f64>;
pub type DiscoveryState32 = postprocess::DiscoveryState<f32>;
pub type DiscoveryState64 = postprocess::DiscoveryState<f64>;
pub type Scene32 = synth::Scene<f32>;
pub type Scene64 = synth::Scene<f64>;
