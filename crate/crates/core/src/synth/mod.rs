//! Deterministic synthetic scenes with known ground truth, modeling the
//! decoder-output contracts: semantic pre-logits near their class
//! descriptors, contrastive pre-logits with known norms just above 1 and
//! unknown norms near 0, and offsets forming a perfect sink per instance.
//!
//! Everything is derived from a single seed through the portable generator in
//! [`rng`], so a spec reproduces bit-identical scenes.

pub mod oracle;
pub mod rng;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{BinaryMask, FeatureMap, InstanceMask, ModelError, OffsetField, SemanticMask};
use crate::scalar::{real, Real};
use crate::stats::{DescriptorBank, StatsError};
use rng::SplitMix64;

const SEM_STREAM: u64 = 1;
const CON_STREAM: u64 = 2;
const OFFSET_STREAM: u64 = 3;
const DIRECTION_STREAM_BASE: u64 = 0x100;

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    /// Two object regions overlap; the offending object index is reported.
    OverlappingRegions {
        object: usize,
    },
    InvalidSpec(String),
    /// Inputs exceed the brute-force oracle's size limits.
    TooLarge,
    Model(ModelError),
    Stats(StatsError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::OverlappingRegions { object } => {
                write!(f, "object {object} overlaps an earlier region")
            }
            SynthError::InvalidSpec(msg) => write!(f, "invalid scene spec: {msg}"),
            SynthError::TooLarge => write!(f, "input exceeds brute-force oracle limits"),
            SynthError::Model(e) => write!(f, "{e}"),
            SynthError::Stats(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<ModelError> for SynthError {
    fn from(e: ModelError) -> Self {
        SynthError::Model(e)
    }
}

impl From<StatsError> for SynthError {
    fn from(e: StatsError) -> Self {
        SynthError::Stats(e)
    }
}

/// One semantic class of the scene: its descriptor-space Gaussian and
/// whether it is known at training time and has object instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub known: bool,
    #[serde(default)]
    pub thing: bool,
}

/// Axis-aligned object footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Disk {
        center_h: f64,
        center_w: f64,
        radius: f64,
    },
}

impl Region {
    fn contains(&self, h: usize, w: usize) -> bool {
        match *self {
            Region::Rect {
                top,
                left,
                height,
                width,
            } => h >= top && h < top + height && w >= left && w < left + width,
            Region::Disk {
                center_h,
                center_w,
                radius,
            } => {
                let dh = h as f64 - center_h;
                let dw = w as f64 - center_w;
                dh * dh + dw * dw <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub region: Region,
}

fn default_name() -> String {
    "scene".to_string()
}

fn default_con_norm_noise() -> f64 {
    0.1
}

fn default_con_unknown_sigma() -> f64 {
    0.1
}

/// Full description of a synthetic scene. Known classes must precede unknown
/// ones so class indices double as descriptor-bank indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub classes: Vec<ClassSpec>,
    /// Known stuff class filling everything outside the objects.
    pub background_class: usize,
    pub objects: Vec<ObjectSpec>,
    /// Standard deviation of the offset noise, in pixels.
    #[serde(default)]
    pub offset_noise: f64,
    /// Half-width scale of the known-norm tube around 1 in the contrastive
    /// stream; known norms are `1 + |noise * z|`, just above the sphere.
    #[serde(default = "default_con_norm_noise")]
    pub con_norm_noise: f64,
    /// Per-dimension sigma of unknown contrastive pre-logits around 0.
    #[serde(default = "default_con_unknown_sigma")]
    pub con_unknown_sigma: f64,
}

impl SceneSpec {
    pub fn num_known(&self) -> usize {
        self.classes.iter().filter(|c| c.known).count()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height == 0 || self.width == 0 {
            return Err(SynthError::InvalidSpec("empty raster".into()));
        }
        if self.dim == 0 {
            return Err(SynthError::InvalidSpec("dim must be at least 1".into()));
        }
        if self.classes.is_empty() {
            return Err(SynthError::InvalidSpec("no classes".into()));
        }
        let num_known = self.num_known();
        if self.classes[..num_known].iter().any(|c| !c.known) {
            return Err(SynthError::InvalidSpec(
                "known classes must precede unknown classes".into(),
            ));
        }
        for (i, class) in self.classes.iter().enumerate() {
            if class.mean.len() != self.dim || class.var.len() != self.dim {
                return Err(SynthError::InvalidSpec(format!(
                    "class {i} moments must have dim {}",
                    self.dim
                )));
            }
            if class.var.iter().chain(&class.mean).any(|v| !v.is_finite())
                || class.var.iter().any(|&v| v < 0.0)
            {
                return Err(SynthError::InvalidSpec(format!(
                    "class {i} moments invalid",
                )));
            }
        }
        if self.background_class >= self.classes.len() || !self.classes[self.background_class].known
        {
            return Err(SynthError::InvalidSpec(
                "background must be a known class".into(),
            ));
        }
        for (i, object) in self.objects.iter().enumerate() {
            if object.class >= self.classes.len() {
                return Err(SynthError::InvalidSpec(format!(
                    "object {i} references class {}",
                    object.class
                )));
            }
        }
        if !(self.offset_noise.is_finite() && self.offset_noise >= 0.0)
            || !(self.con_norm_noise.is_finite() && self.con_norm_noise >= 0.0)
            || !(self.con_unknown_sigma.is_finite() && self.con_unknown_sigma >= 0.0)
        {
            return Err(SynthError::InvalidSpec("noise parameters invalid".into()));
        }
        Ok(())
    }

    /// Frozen descriptor bank of the known classes, straight from the spec
    /// moments.
    pub fn known_bank<T: Real>(&self) -> Result<DescriptorBank<T>, SynthError> {
        let moments = self.classes[..self.num_known()]
            .iter()
            .map(|c| {
                (
                    c.mean.iter().map(|&v| real::<T>(v)).collect(),
                    c.var.iter().map(|&v| real::<T>(v)).collect(),
                    1000u64,
                    true,
                )
            })
            .collect::<Vec<_>>();
        Ok(DescriptorBank::from_moments(self.dim, moments)?)
    }

    /// Bank indices of the known thing classes.
    pub fn known_thing_classes(&self) -> std::collections::BTreeSet<u32> {
        self.classes[..self.num_known()]
            .iter()
            .enumerate()
            .filter(|(_, c)| c.thing)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// A generated scene: ground truth plus the three decoder output streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub num_known: usize,
    pub num_classes: usize,
    /// Per-pixel class indices over the spec's class list.
    pub gt_semantic: SemanticMask,
    /// Object instances `1..=N` in spec order, `0` elsewhere.
    pub gt_instance: InstanceMask,
    pub sem_features: FeatureMap<T>,
    pub con_features: FeatureMap<T>,
    pub offsets: OffsetField<T>,
}

impl<T: Real> Scene<T> {
    /// Pixels whose class is unknown at training time.
    pub fn gt_anomaly(&self) -> BinaryMask {
        let bound = self.num_known as u32;
        BinaryMask::from_fn(
            self.gt_semantic.height(),
            self.gt_semantic.width(),
            |h, w| self.gt_semantic.label(h, w) >= bound,
        )
    }

    /// Task-format open-world labels: 0 for known, `1..` for unknown classes.
    pub fn gt_open_world_semantic(&self) -> SemanticMask {
        let bound = self.num_known as u32;
        SemanticMask::from_fn(
            self.gt_semantic.height(),
            self.gt_semantic.width(),
            |h, w| {
                let label = self.gt_semantic.label(h, w);
                if label < bound {
                    0
                } else {
                    label - bound + 1
                }
            },
        )
    }

    /// Instances restricted to the unknown area, re-canonicalized.
    pub fn gt_unknown_instances(&self) -> InstanceMask {
        let bound = self.num_known as u32;
        let masked = InstanceMask::from_fn(
            self.gt_instance.height(),
            self.gt_instance.width(),
            |h, w| {
                if self.gt_semantic.label(h, w) >= bound {
                    self.gt_instance.id(h, w)
                } else {
                    0
                }
            },
        );
        crate::model::canonicalize_instances(&masked)
    }

    /// Ideal anomaly score map: 1 inside the unknown area, 0 outside.
    pub fn perfect_scores(&self) -> FeatureMap<T> {
        let anomaly = self.gt_anomaly();
        FeatureMap::from_fn(anomaly.height(), anomaly.width(), 1, |h, w, _| {
            if anomaly.get(h, w) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Renders the spec into ground-truth masks and decoder streams; fully
/// determined by the seed.
pub fn generate<T: Real>(spec: &SceneSpec) -> Result<Scene<T>, SynthError> {
    spec.validate()?;
    let (height, width, dim) = (spec.height, spec.width, spec.dim);

    // Paint semantic classes and instance ids; overlap is an error.
    let mut labels = vec![spec.background_class as u32; height * width];
    let mut ids = vec![0u32; height * width];
    for (i, object) in spec.objects.iter().enumerate() {
        let mut any = false;
        for h in 0..height {
            for w in 0..width {
                if !object.region.contains(h, w) {
                    continue;
                }
                any = true;
                let idx = h * width + w;
                if ids[idx] != 0 {
                    return Err(SynthError::OverlappingRegions { object: i });
                }
                ids[idx] = i as u32 + 1;
                labels[idx] = object.class as u32;
            }
        }
        if !any {
            return Err(SynthError::InvalidSpec(format!(
                "object {i} covers no pixel"
            )));
        }
    }
    let gt_semantic = SemanticMask::new(height, width, labels)?;
    let gt_instance = InstanceMask::new(height, width, ids)?;

    // Per-class unit directions for the contrastive stream.
    let num_known = spec.num_known();
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(num_known);
    for class in 0..num_known {
        let mut rng = SplitMix64::derive(spec.seed, DIRECTION_STREAM_BASE + class as u64);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                directions.push(v.into_iter().map(|x| x / norm).collect());
                break;
            }
        }
    }

    let mut sem_rng = SplitMix64::derive(spec.seed, SEM_STREAM);
    let sem_features = FeatureMap::from_fn(height, width, dim, |h, w, d| {
        let class = &spec.classes[gt_semantic.label(h, w) as usize];
        real::<T>(class.mean[d] + class.var[d].sqrt() * sem_rng.next_normal())
    });

    let mut con_rng = SplitMix64::derive(spec.seed, CON_STREAM);
    let mut con_values = Vec::with_capacity(height * width * dim);
    for h in 0..height {
        for w in 0..width {
            let label = gt_semantic.label(h, w) as usize;
            if label < num_known {
                // Known: class direction scaled to a norm just above 1.
                let norm = 1.0 + (spec.con_norm_noise * con_rng.next_normal()).abs();
                for d in 0..dim {
                    con_values.push(real::<T>(directions[label][d] * norm));
                }
            } else {
                for _ in 0..dim {
                    con_values.push(real::<T>(spec.con_unknown_sigma * con_rng.next_normal()));
                }
            }
        }
    }
    let con_features = FeatureMap::new(height, width, dim, con_values)?;

    // Offsets: perfect sink to the instance centroid plus noise; background
    // pixels point nowhere.
    let centroids = crate::model::instance_centroids(&gt_instance);
    let mut off_rng = SplitMix64::derive(spec.seed, OFFSET_STREAM);
    let offsets = OffsetField::from_fn(height, width, |h, w| {
        let id = gt_instance.id(h, w);
        if id == 0 {
            [T::zero(), T::zero()]
        } else {
            let c = centroids[&id];
            [
                real::<T>(c[0] - h as f64 + spec.offset_noise * off_rng.next_normal()),
                real::<T>(c[1] - w as f64 + spec.offset_noise * off_rng.next_normal()),
            ]
        }
    });

    Ok(Scene {
        num_known,
        num_classes: spec.classes.len(),
        gt_semantic,
        gt_instance,
        sem_features,
        con_features,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            name: "test".into(),
            seed: 7,
            height: 16,
            width: 16,
            dim: 4,
            classes: vec![
                ClassSpec {
                    mean: vec![0.0; 4],
                    var: vec![0.04; 4],
                    known: true,
                    thing: false,
                },
                ClassSpec {
                    mean: vec![10.0, 0.0, 0.0, 0.0],
                    var: vec![0.04; 4],
                    known: true,
                    thing: true,
                },
                ClassSpec {
                    mean: vec![0.0, 10.0, 0.0, 0.0],
                    var: vec![0.04; 4],
                    known: false,
                    thing: true,
                },
            ],
            background_class: 0,
            objects: vec![
                ObjectSpec {
                    class: 1,
                    region: Region::Rect {
                        top: 1,
                        left: 1,
                        height: 4,
                        width: 4,
                    },
                },
                ObjectSpec {
                    class: 2,
                    region: Region::Rect {
                        top: 9,
                        left: 9,
                        height: 5,
                        width: 5,
                    },
                },
            ],
            offset_noise: 0.1,
            con_norm_noise: 0.1,
            con_unknown_sigma: 0.1,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a: Scene<f64> = generate(&spec).unwrap();
        let b: Scene<f64> = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_match_the_layout() {
        let scene: Scene<f64> = generate(&small_spec()).unwrap();
        assert_eq!(scene.gt_semantic.label(0, 0), 0);
        assert_eq!(scene.gt_semantic.label(2, 2), 1);
        assert_eq!(scene.gt_semantic.label(10, 10), 2);
        assert_eq!(scene.gt_instance.id(2, 2), 1);
        assert_eq!(scene.gt_instance.id(10, 10), 2);
        assert!(scene.gt_anomaly().get(10, 10));
        assert!(!scene.gt_anomaly().get(2, 2));
        assert_eq!(scene.gt_open_world_semantic().label(10, 10), 1);
        assert_eq!(scene.gt_unknown_instances().id(10, 10), 1);
        assert_eq!(scene.gt_unknown_instances().id(2, 2), 0);
    }

    #[test]
    fn overlap_is_rejected() {
        let mut spec = small_spec();
        spec.objects[1] = ObjectSpec {
            class: 2,
            region: Region::Rect {
                top: 2,
                left: 2,
                height: 4,
                width: 4,
            },
        };
        assert!(matches!(
            generate::<f64>(&spec),
            Err(SynthError::OverlappingRegions { object: 1 })
        ));
    }

    #[test]
    fn empirical_class_means_track_the_spec() {
        let mut spec = small_spec();
        spec.height = 48;
        spec.width = 48;
        spec.objects[1].region = Region::Rect {
            top: 20,
            left: 20,
            height: 20,
            width: 20,
        };
        let scene: Scene<f64> = generate(&spec).unwrap();
        // Unknown-class pixels: mean within 4 sigma / sqrt(n) of the spec.
        let mut sum = [0.0f64; 4];
        let mut n = 0.0f64;
        for h in 0..48 {
            for w in 0..48 {
                if scene.gt_semantic.label(h, w) == 2 {
                    for d in 0..4 {
                        sum[d] += scene.sem_features.pixel(h, w)[d];
                    }
                    n += 1.0;
                }
            }
        }
        for d in 0..4 {
            let tolerance = 4.0 * 0.2 / n.sqrt();
            assert!((sum[d] / n - spec.classes[2].mean[d]).abs() < tolerance);
        }
    }

    #[test]
    fn contrastive_norms_respect_the_tube() {
        let scene: Scene<f64> = generate(&small_spec()).unwrap();
        for h in 0..16 {
            for w in 0..16 {
                let norm: f64 = scene
                    .con_features
                    .pixel(h, w)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if scene.gt_anomaly().get(h, w) {
                    assert!(norm < 1.0);
                } else {
                    assert!(norm >= 1.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn disk_regions_paint_circles() {
        let mut spec = small_spec();
        spec.objects = vec![ObjectSpec {
            class: 2,
            region: Region::Disk {
                center_h: 8.0,
                center_w: 8.0,
                radius: 3.0,
            },
        }];
        let scene: Scene<f64> = generate(&spec).unwrap();
        assert_eq!(scene.gt_semantic.label(8, 8), 2);
        assert_eq!(scene.gt_semantic.label(8, 11), 2);
        assert_eq!(scene.gt_semantic.label(8, 12), 0);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = small_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
