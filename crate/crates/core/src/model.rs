//! Shared raster, feature, and parameter types.
//!
//! Pixel coordinates are `(row h, col w)` with the origin at the top-left.
//! All types validate their invariants at construction and are immutable
//! afterwards, so they can be shared freely across threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    LengthMismatch {
        expected: usize,
        got: usize,
    },
    /// An instance id occupies pixels of more than one semantic class.
    InconsistentPanoptic {
        instance: u32,
        first_class: u32,
        second_class: u32,
    },
    NonFinite,
    InvalidDim,
    InvalidParameter(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::ShapeMismatch { expected, got } => write!(
                f,
                "shape mismatch: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            ModelError::LengthMismatch { expected, got } => {
                write!(f, "buffer length mismatch: expected {expected}, got {got}")
            }
            ModelError::InconsistentPanoptic {
                instance,
                first_class,
                second_class,
            } => write!(
                f,
                "instance {instance} straddles semantic classes {first_class} and {second_class}"
            ),
            ModelError::NonFinite => write!(f, "non-finite value"),
            ModelError::InvalidDim => write!(f, "feature dimension must be at least 1"),
            ModelError::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
        }
    }
}

impl std::error::Error for ModelError {}

/// Per-pixel class-id raster.
///
/// Label `0` is reserved by convention: "known" in open-world outputs and
/// "not anomaly" in anomaly outputs. The type itself accepts any ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, ModelError> {
        if labels.len() != height * width {
            return Err(ModelError::LengthMismatch {
                expected: height * width,
                got: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                labels.push(f(h, w));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn label(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Largest label present, or `None` for an empty raster.
    pub fn max_label(&self) -> Option<u32> {
        self.labels.iter().copied().max()
    }
}

/// Per-pixel instance-id raster; id `0` marks known and no-object areas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self, ModelError> {
        if ids.len() != height * width {
            return Err(ModelError::LengthMismatch {
                expected: height * width,
                got: ids.len(),
            });
        }
        Ok(Self { height, width, ids })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut ids = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                ids.push(f(h, w));
            }
        }
        Self { height, width, ids }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn id(&self, h: usize, w: usize) -> u32 {
        self.ids[h * self.width + w]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Per-pixel boolean raster, shared by anomaly masks, thing masks, and binary
/// ground-truth instance masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    member: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, member: Vec<bool>) -> Result<Self, ModelError> {
        if member.len() != height * width {
            return Err(ModelError::LengthMismatch {
                expected: height * width,
                got: member.len(),
            });
        }
        Ok(Self {
            height,
            width,
            member,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut member = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                member.push(f(h, w));
            }
        }
        Self {
            height,
            width,
            member,
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            member: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.member[h * self.width + w]
    }

    pub fn values(&self) -> &[bool] {
        &self.member
    }

    pub fn count_true(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }
}

/// H×W×D real-valued field, stored row-major with the feature dimension
/// innermost. Holds pre-logits, and pre-softmax logits when `dim` equals the
/// class count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        values: Vec<T>,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidDim);
        }
        if values.len() != height * width * dim {
            return Err(ModelError::LengthMismatch {
                expected: height * width * dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        assert!(dim >= 1, "feature dimension must be at least 1");
        let mut values = Vec::with_capacity(height * width * dim);
        for h in 0..height {
            for w in 0..width {
                for d in 0..dim {
                    values.push(f(h, w, d));
                }
            }
        }
        Self {
            height,
            width,
            dim,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Feature vector at pixel `(h, w)`.
    pub fn pixel(&self, h: usize, w: usize) -> &[T] {
        let start = (h * self.width + w) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// H×W field of 2-vectors `(Δh, Δw)` in pixel units. The pointed-to location
/// `p + offset_p` may lie outside the image; clustering handles that.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T> {
    height: usize,
    width: usize,
    offsets: Vec<[T; 2]>,
}

impl<T: Real> OffsetField<T> {
    pub fn new(height: usize, width: usize, offsets: Vec<[T; 2]>) -> Result<Self, ModelError> {
        if offsets.len() != height * width {
            return Err(ModelError::LengthMismatch {
                expected: height * width,
                got: offsets.len(),
            });
        }
        if offsets
            .iter()
            .any(|o| !o[0].is_finite() || !o[1].is_finite())
        {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            height,
            width,
            offsets,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [T; 2]) -> Self {
        let mut offsets = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                offsets.push(f(h, w));
            }
        }
        Self {
            height,
            width,
            offsets,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn offset(&self, h: usize, w: usize) -> [T; 2] {
        self.offsets[h * self.width + w]
    }

    pub fn offsets(&self) -> &[[T; 2]] {
        &self.offsets
    }

    /// Location pointed to by the prediction at `(h, w)`.
    pub fn pointed(&self, h: usize, w: usize) -> [T; 2] {
        let o = self.offset(h, w);
        [real::<T>(h as f64) + o[0], real::<T>(w as f64) + o[1]]
    }
}

/// Loss weights for the three decoders plus the temperature and the
/// clustering radius, named by the loss each one scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub semantic: T,
    pub feature: T,
    pub contrastive: T,
    pub objectosphere: T,
    pub offset: T,
    pub divergence: T,
    pub divergence_aux: T,
    pub curl: T,
    pub curl_aux: T,
    /// Contrastive temperature, > 0.
    pub tau: T,
    /// Clustering radius in pixels, > 0.
    pub eta: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            semantic: real(0.8),
            feature: real(0.2),
            contrastive: real(0.5),
            objectosphere: real(0.5),
            offset: real(0.4),
            divergence: real(0.2),
            divergence_aux: real(0.1),
            curl: real(0.2),
            curl_aux: real(0.1),
            tau: real(0.1),
            eta: real(1.0),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        let weights = [
            self.semantic,
            self.feature,
            self.contrastive,
            self.objectosphere,
            self.offset,
            self.divergence,
            self.divergence_aux,
            self.curl,
            self.curl_aux,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(ModelError::InvalidParameter("loss weights"));
        }
        if !self.tau.is_finite() || self.tau <= T::zero() {
            return Err(ModelError::InvalidParameter("tau"));
        }
        if !self.eta.is_finite() || self.eta <= T::zero() {
            return Err(ModelError::InvalidParameter("eta"));
        }
        Ok(())
    }
}

/// Checks that a semantic/instance pair is panoptic-consistent: shapes match
/// and every instance id occupies pixels of exactly one semantic class.
pub fn validate_pair(sem: &SemanticMask, inst: &InstanceMask) -> Result<(), ModelError> {
    if sem.shape() != inst.shape() {
        return Err(ModelError::ShapeMismatch {
            expected: sem.shape(),
            got: inst.shape(),
        });
    }
    let mut seen: HashMap<u32, u32> = HashMap::new();
    for (&id, &class) in inst.ids().iter().zip(sem.labels()) {
        if id == 0 {
            continue;
        }
        match seen.get(&id) {
            None => {
                seen.insert(id, class);
            }
            Some(&first) if first != class => {
                return Err(ModelError::InconsistentPanoptic {
                    instance: id,
                    first_class: first,
                    second_class: class,
                });
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Relabels instance ids to `{0, 1, …, N}` in order of first appearance in a
/// row-major scan; `0` stays `0` and the partition is preserved.
pub fn canonicalize_instances(inst: &InstanceMask) -> InstanceMask {
    let mut map: HashMap<u32, u32> = HashMap::new();
    let mut next = 1u32;
    let ids = inst
        .ids()
        .iter()
        .map(|&id| {
            if id == 0 {
                0
            } else {
                *map.entry(id).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                })
            }
        })
        .collect();
    InstanceMask {
        height: inst.height,
        width: inst.width,
        ids,
    }
}

/// Unweighted mean pixel coordinate of every instance, keyed by id. Centroids
/// are real-valued and may lie outside the instance.
pub fn instance_centroids(inst: &InstanceMask) -> BTreeMap<u32, [f64; 2]> {
    let mut sums: BTreeMap<u32, ([f64; 2], u64)> = BTreeMap::new();
    for h in 0..inst.height() {
        for w in 0..inst.width() {
            let id = inst.id(h, w);
            if id == 0 {
                continue;
            }
            let entry = sums.entry(id).or_insert(([0.0, 0.0], 0));
            entry.0[0] += h as f64;
            entry.0[1] += w as f64;
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(id, (sum, n))| (id, [sum[0] / n as f64, sum[1] / n as f64]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sem(rows: &[&[u32]]) -> SemanticMask {
        let height = rows.len();
        let width = rows[0].len();
        SemanticMask::new(height, width, rows.concat()).unwrap()
    }

    fn inst(rows: &[&[u32]]) -> InstanceMask {
        let height = rows.len();
        let width = rows[0].len();
        InstanceMask::new(height, width, rows.concat()).unwrap()
    }

    #[test]
    fn validate_pair_accepts_consistent_masks() {
        let s = sem(&[&[1, 1], &[0, 0]]);
        let i = inst(&[&[1, 1], &[0, 0]]);
        assert!(validate_pair(&s, &i).is_ok());
    }

    #[test]
    fn validate_pair_rejects_straddling_instance() {
        let s = sem(&[&[1, 2], &[0, 0]]);
        let i = inst(&[&[1, 1], &[0, 0]]);
        match validate_pair(&s, &i) {
            Err(ModelError::InconsistentPanoptic { instance: 1, .. }) => {}
            other => panic!("expected InconsistentPanoptic, got {other:?}"),
        }
    }

    #[test]
    fn validate_pair_rejects_shape_mismatch() {
        let s = sem(&[&[1, 1], &[0, 0]]);
        let i = InstanceMask::new(2, 3, vec![0; 6]).unwrap();
        assert!(matches!(
            validate_pair(&s, &i),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn canonicalize_relabels_in_first_appearance_order() {
        let i = inst(&[&[0, 5], &[9, 5]]);
        let c = canonicalize_instances(&i);
        assert_eq!(c.ids(), &[0, 1, 2, 1]);
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let i = inst(&[&[0, 5], &[9, 5]]);
        let once = canonicalize_instances(&i);
        let twice = canonicalize_instances(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn canonicalize_keeps_all_zeros() {
        let i = inst(&[&[0, 0], &[0, 0]]);
        assert_eq!(canonicalize_instances(&i).ids(), &[0, 0, 0, 0]);
    }

    #[test]
    fn centroids_are_unweighted_means() {
        let i = inst(&[&[1, 1], &[0, 2]]);
        let c = instance_centroids(&i);
        assert_eq!(c[&1], [0.0, 0.5]);
        assert_eq!(c[&2], [1.0, 1.0]);
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let r = FeatureMap::new(1, 1, 2, vec![0.0f64, f64::NAN]);
        assert!(matches!(r, Err(ModelError::NonFinite)));
    }

    #[test]
    fn default_weights_validate() {
        LossWeights::<f64>::default().validate().unwrap();
    }
}
