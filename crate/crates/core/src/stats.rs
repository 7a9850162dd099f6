//! Running class-descriptor statistics and the semantic/contrastive decoder
//! losses, computed as pure functions over feature maps and label masks.
//!
//! The running mean/variance use the numerically stable parallel-merge form
//! of the sum-of-squares update, so partial banks built over arbitrary
//! batchings of the same samples agree to accumulation tolerance and can be
//! merged associatively.

use std::collections::BTreeSet;
use std::fmt;

use crate::model::{BinaryMask, FeatureMap, SemanticMask};
use crate::scalar::{real, Real};

/// Variance floor applied before any division by a per-dimension variance.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum StatsError {
    DimMismatch {
        expected: usize,
        got: usize,
    },
    UnknownClass {
        class: usize,
    },
    /// The class has no accumulated samples, so mean and variance are undefined.
    UninitializedClass {
        class: usize,
    },
    ZeroVariance {
        class: usize,
        dim: usize,
    },
    ZeroNormDescriptor {
        class: usize,
    },
    EmptyClass {
        class: usize,
    },
    LabelOutOfRange {
        label: u32,
        bound: usize,
    },
    ShapeMismatch,
    ClassCountMismatch {
        left: usize,
        right: usize,
    },
    InvalidTemperature,
}

impl fmt::Display for StatsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatsError::DimMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            StatsError::UnknownClass { class } => write!(f, "unknown class {class}"),
            StatsError::UninitializedClass { class } => {
                write!(f, "class {class} has no accumulated samples")
            }
            StatsError::ZeroVariance { class, dim } => {
                write!(f, "class {class} has zero variance in dimension {dim}")
            }
            StatsError::ZeroNormDescriptor { class } => {
                write!(f, "class {class} descriptor has zero norm")
            }
            StatsError::EmptyClass { class } => write!(f, "class {class} has zero pixels"),
            StatsError::LabelOutOfRange { label, bound } => {
                write!(f, "label {label} out of range (bound {bound})")
            }
            StatsError::ShapeMismatch => write!(f, "raster shapes do not match"),
            StatsError::ClassCountMismatch { left, right } => {
                write!(f, "class count mismatch: {left} vs {right}")
            }
            StatsError::InvalidTemperature => write!(f, "temperature must be finite and > 0"),
        }
    }
}

impl std::error::Error for StatsError {}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ClassStats<T> {
    pub(crate) mean: Vec<T>,
    /// Sum of squared deviations from the mean; population variance is `m2 / count`.
    pub(crate) m2: Vec<T>,
    pub(crate) count: u64,
    pub(crate) frozen: bool,
}

impl<T: Real> ClassStats<T> {
    fn empty(dim: usize, frozen: bool) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            m2: vec![T::zero(); dim],
            count: 0,
            frozen,
        }
    }

    /// Chan et al. parallel merge of two (mean, m2, count) summaries.
    fn merge(&mut self, mean_b: &[T], m2_b: &[T], count_b: u64) {
        if count_b == 0 {
            return;
        }
        if self.count == 0 {
            self.mean.copy_from_slice(mean_b);
            self.m2.copy_from_slice(m2_b);
            self.count = count_b;
            return;
        }
        let na = real::<T>(self.count as f64);
        let nb = real::<T>(count_b as f64);
        let total = na + nb;
        for d in 0..self.mean.len() {
            let delta = mean_b[d] - self.mean[d];
            self.mean[d] = self.mean[d] + delta * nb / total;
            self.m2[d] = self.m2[d] + m2_b[d] + delta * delta * na * nb / total;
        }
        self.count += count_b;
    }
}

/// Per-class running mean and per-dimension population variance of
/// descriptor vectors, with a frozen flag separating training-time classes
/// from classes that may still evolve at test time.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBank<T> {
    dim: usize,
    classes: Vec<ClassStats<T>>,
}

impl<T: Real> DescriptorBank<T> {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        assert!(dim >= 1, "descriptor dimension must be at least 1");
        Self {
            dim,
            classes: (0..num_classes)
                .map(|_| ClassStats::empty(dim, false))
                .collect(),
        }
    }

    /// Builds a bank directly from per-class moments. `var` is the population
    /// variance; a zero count leaves the class unusable.
    pub fn from_moments(
        dim: usize,
        classes: impl IntoIterator<Item = (Vec<T>, Vec<T>, u64, bool)>,
    ) -> Result<Self, StatsError> {
        let mut bank = Self::new(dim, 0);
        for (mean, var, count, frozen) in classes {
            if mean.len() != dim || var.len() != dim {
                return Err(StatsError::DimMismatch {
                    expected: dim,
                    got: mean.len().max(var.len()),
                });
            }
            let n = real::<T>(count as f64);
            bank.classes.push(ClassStats {
                m2: var.iter().map(|&v| v * n).collect(),
                mean,
                count,
                frozen,
            });
        }
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.classes[class].count
    }

    pub fn is_frozen(&self, class: usize) -> bool {
        self.classes[class].frozen
    }

    /// Running mean; `None` while the class has no samples.
    pub fn mean(&self, class: usize) -> Option<&[T]> {
        let c = &self.classes[class];
        (c.count > 0).then_some(c.mean.as_slice())
    }

    /// Per-dimension population variance; `None` while the class has no samples.
    pub fn variance(&self, class: usize) -> Option<Vec<T>> {
        let c = &self.classes[class];
        if c.count == 0 {
            return None;
        }
        let n = real::<T>(c.count as f64);
        Some(c.m2.iter().map(|&m| m / n).collect())
    }

    pub fn freeze_all(&mut self) {
        for c in &mut self.classes {
            c.frozen = true;
        }
    }

    /// Appends a class seeded with a single sample; returns its index.
    pub fn push_class_with_sample(
        &mut self,
        sample: &[T],
        frozen: bool,
    ) -> Result<usize, StatsError> {
        if sample.len() != self.dim {
            return Err(StatsError::DimMismatch {
                expected: self.dim,
                got: sample.len(),
            });
        }
        let mut stats = ClassStats::empty(self.dim, frozen);
        stats.mean.copy_from_slice(sample);
        stats.count = 1;
        self.classes.push(stats);
        Ok(self.classes.len() - 1)
    }

    /// Folds a batch of samples into one class's running statistics. The batch
    /// is summarized two-pass and merged, so any batching of the same sample
    /// multiset yields the same mean and variance to accumulation tolerance.
    pub fn update<S: AsRef<[T]>>(&mut self, class: usize, samples: &[S]) -> Result<(), StatsError> {
        if class >= self.classes.len() {
            return Err(StatsError::UnknownClass { class });
        }
        if samples.is_empty() {
            return Ok(());
        }
        for s in samples {
            if s.as_ref().len() != self.dim {
                return Err(StatsError::DimMismatch {
                    expected: self.dim,
                    got: s.as_ref().len(),
                });
            }
        }
        let n = real::<T>(samples.len() as f64);
        let mut mean = vec![T::zero(); self.dim];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s.as_ref()) {
                *m = *m + v;
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        let mut m2 = vec![T::zero(); self.dim];
        for s in samples {
            for d in 0..self.dim {
                let delta = s.as_ref()[d] - mean[d];
                m2[d] = m2[d] + delta * delta;
            }
        }
        self.classes[class].merge(&mean, &m2, samples.len() as u64);
        Ok(())
    }

    /// Merges another bank accumulated over a disjoint sample stream.
    /// Associative to tolerance; class structure must match.
    pub fn merge(&mut self, other: &DescriptorBank<T>) -> Result<(), StatsError> {
        if self.dim != other.dim {
            return Err(StatsError::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        if self.classes.len() != other.classes.len() {
            return Err(StatsError::ClassCountMismatch {
                left: self.classes.len(),
                right: other.classes.len(),
            });
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(&b.mean, &b.m2, b.count);
        }
        Ok(())
    }

    pub(crate) fn raw_classes(&self) -> &[ClassStats<T>] {
        &self.classes
    }

    pub(crate) fn from_raw(dim: usize, classes: Vec<ClassStats<T>>) -> Self {
        Self { dim, classes }
    }
}

pub(crate) fn raw_class<T: Real>(
    mean: Vec<T>,
    m2: Vec<T>,
    count: u64,
    frozen: bool,
) -> ClassStats<T> {
    ClassStats {
        mean,
        m2,
        count,
        frozen,
    }
}

/// Per-class positive weights, e.g. inverse class frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights<T> {
    values: Vec<T>,
}

impl<T: Real> ClassWeights<T> {
    pub fn new(values: Vec<T>) -> Result<Self, StatsError> {
        for (k, v) in values.iter().enumerate() {
            if !v.is_finite() || *v <= T::zero() {
                return Err(StatsError::EmptyClass { class: k });
            }
        }
        Ok(Self { values })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            values: vec![T::one(); num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, class: usize) -> T {
        self.values[class]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

fn check_shapes<T: Real>(map: &FeatureMap<T>, mask: &SemanticMask) -> Result<(), StatsError> {
    if map.shape() != mask.shape() {
        return Err(StatsError::ShapeMismatch);
    }
    Ok(())
}

/// `ω_k = total_pixels / (K · count_k)` over the given label masks; the
/// pixel-weighted mean of the resulting weights is 1.
pub fn inverse_frequency_weights<T: Real>(
    labels: &[SemanticMask],
    num_classes: usize,
    ignore_label: Option<u32>,
) -> Result<ClassWeights<T>, StatsError> {
    let mut counts = vec![0u64; num_classes];
    for mask in labels {
        for &label in mask.labels() {
            if Some(label) == ignore_label {
                continue;
            }
            let k = label as usize;
            if k >= num_classes {
                return Err(StatsError::LabelOutOfRange {
                    label,
                    bound: num_classes,
                });
            }
            counts[k] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut weights = Vec::with_capacity(num_classes);
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(StatsError::EmptyClass { class: k });
        }
        weights
            .push(real::<T>(total as f64) / (real::<T>(num_classes as f64) * real::<T>(c as f64)));
    }
    ClassWeights::new(weights)
}

/// Weighted cross-entropy over the softmax of per-pixel logits, averaged over
/// non-ignored pixels.
pub fn weighted_cross_entropy<T: Real>(
    logits: &FeatureMap<T>,
    target: &SemanticMask,
    weights: &ClassWeights<T>,
    ignore_label: Option<u32>,
) -> Result<T, StatsError> {
    check_shapes(logits, target)?;
    if logits.dim() != weights.len() {
        return Err(StatsError::DimMismatch {
            expected: weights.len(),
            got: logits.dim(),
        });
    }
    let mut sum = T::zero();
    let mut pixels = 0u64;
    for h in 0..target.height() {
        for w in 0..target.width() {
            let label = target.label(h, w);
            if Some(label) == ignore_label {
                continue;
            }
            let k = label as usize;
            if k >= logits.dim() {
                return Err(StatsError::LabelOutOfRange {
                    label,
                    bound: logits.dim(),
                });
            }
            let f = logits.pixel(h, w);
            // log softmax(f)[k] = f[k] - logsumexp(f), computed stably.
            let max = f.iter().copied().fold(f[0], T::max);
            let mut acc = T::zero();
            for &v in f {
                acc = acc + (v - max).exp();
            }
            let lse = max + acc.ln();
            sum = sum + weights.get(k) * (lse - f[k]);
            pixels += 1;
        }
    }
    if pixels == 0 {
        return Ok(T::zero());
    }
    Ok(sum / real::<T>(pixels as f64))
}

/// Per-dimension Mahalanobis pull of each pixel's pre-logit toward its class
/// descriptor, averaged over non-ignored pixels. `var_floor` clamps each
/// variance from below before the division.
pub fn feature_loss<T: Real>(
    prelogits: &FeatureMap<T>,
    target: &SemanticMask,
    bank: &DescriptorBank<T>,
    ignore_label: Option<u32>,
    var_floor: T,
) -> Result<T, StatsError> {
    check_shapes(prelogits, target)?;
    if prelogits.dim() != bank.dim() {
        return Err(StatsError::DimMismatch {
            expected: bank.dim(),
            got: prelogits.dim(),
        });
    }
    // Lazily prepared per-class (mean, floored variance).
    let mut prepared: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; bank.num_classes()];
    let mut sum = T::zero();
    let mut pixels = 0u64;
    for h in 0..target.height() {
        for w in 0..target.width() {
            let label = target.label(h, w);
            if Some(label) == ignore_label {
                continue;
            }
            let k = label as usize;
            if k >= bank.num_classes() {
                return Err(StatsError::LabelOutOfRange {
                    label,
                    bound: bank.num_classes(),
                });
            }
            if prepared[k].is_none() {
                let mean = bank
                    .mean(k)
                    .ok_or(StatsError::UninitializedClass { class: k })?
                    .to_vec();
                let var = bank.variance(k).expect("count checked above");
                let mut floored = Vec::with_capacity(var.len());
                for (d, &v) in var.iter().enumerate() {
                    let eff = v.max(var_floor);
                    if eff <= T::zero() {
                        return Err(StatsError::ZeroVariance { class: k, dim: d });
                    }
                    floored.push(eff);
                }
                prepared[k] = Some((mean, floored));
            }
            let (mean, var) = prepared[k].as_ref().unwrap();
            let feat = prelogits.pixel(h, w);
            for d in 0..feat.len() {
                let delta = feat[d] - mean[d];
                sum = sum + delta * delta / var[d];
            }
            pixels += 1;
        }
    }
    if pixels == 0 {
        return Ok(T::zero());
    }
    Ok(sum / real::<T>(pixels as f64))
}

/// Contrastive pull of per-image class means toward the unit-normalized bank
/// descriptors, summed over the classes present in the image. Classes absent
/// from the image contribute only to the softmax denominator via the bank.
pub fn contrastive_loss<T: Real>(
    prelogits: &FeatureMap<T>,
    target: &SemanticMask,
    bank: &DescriptorBank<T>,
    tau: T,
    ignore_label: Option<u32>,
) -> Result<T, StatsError> {
    check_shapes(prelogits, target)?;
    if prelogits.dim() != bank.dim() {
        return Err(StatsError::DimMismatch {
            expected: bank.dim(),
            got: prelogits.dim(),
        });
    }
    if !tau.is_finite() || tau <= T::zero() {
        return Err(StatsError::InvalidTemperature);
    }

    let mut present: BTreeSet<u32> = BTreeSet::new();
    for &label in target.labels() {
        if Some(label) != ignore_label {
            present.insert(label);
        }
    }
    for &label in &present {
        let k = label as usize;
        if k >= bank.num_classes() {
            return Err(StatsError::LabelOutOfRange {
                label,
                bound: bank.num_classes(),
            });
        }
        if bank.count(k) == 0 {
            return Err(StatsError::UninitializedClass { class: k });
        }
    }

    // Unit-normalized descriptors for every usable bank class.
    let mut normalized: Vec<Option<Vec<T>>> = Vec::with_capacity(bank.num_classes());
    for k in 0..bank.num_classes() {
        match bank.mean(k) {
            None => normalized.push(None),
            Some(mean) => {
                let norm = mean.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                if norm <= T::zero() {
                    return Err(StatsError::ZeroNormDescriptor { class: k });
                }
                normalized.push(Some(mean.iter().map(|&v| v / norm).collect()));
            }
        }
    }

    let mut loss = T::zero();
    for &label in &present {
        let k = label as usize;
        // Per-image mean pre-logit of class k.
        let mut mean = vec![T::zero(); prelogits.dim()];
        let mut n = 0u64;
        for h in 0..target.height() {
            for w in 0..target.width() {
                if target.label(h, w) != label {
                    continue;
                }
                for (m, &v) in mean.iter_mut().zip(prelogits.pixel(h, w)) {
                    *m = *m + v;
                }
                n += 1;
            }
        }
        let n = real::<T>(n as f64);
        for m in &mut mean {
            *m = *m / n;
        }

        let mut logits: Vec<T> = Vec::new();
        let mut own = T::zero();
        for (i, desc) in normalized.iter().enumerate() {
            let Some(desc) = desc else { continue };
            let dot = mean
                .iter()
                .zip(desc)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            let logit = dot / tau;
            if i == k {
                own = logit;
            }
            logits.push(logit);
        }
        let max = logits.iter().copied().fold(logits[0], T::max);
        let mut acc = T::zero();
        for &v in &logits {
            acc = acc + (v - max).exp();
        }
        let lse = max + acc.ln();
        loss = loss + (lse - own);
    }
    Ok(loss)
}

/// Pushes known-pixel feature norms above 1 and unknown-pixel norms to 0,
/// averaged over all pixels.
pub fn objectosphere_loss<T: Real>(
    prelogits: &FeatureMap<T>,
    known: &BinaryMask,
) -> Result<T, StatsError> {
    if prelogits.shape() != known.shape() {
        return Err(StatsError::ShapeMismatch);
    }
    let mut sum = T::zero();
    let mut pixels = 0u64;
    for h in 0..known.height() {
        for w in 0..known.width() {
            let norm_sq = prelogits
                .pixel(h, w)
                .iter()
                .fold(T::zero(), |acc, &v| acc + v * v);
            sum = sum
                + if known.get(h, w) {
                    (T::one() - norm_sq).max(T::zero())
                } else {
                    norm_sq
                };
            pixels += 1;
        }
    }
    if pixels == 0 {
        return Ok(T::zero());
    }
    Ok(sum / real::<T>(pixels as f64))
}

/// Weighted sum of loss parts; the decoder objectives are all of this form.
pub fn combine<T: Real>(weights: &[T], parts: &[T]) -> T {
    assert_eq!(weights.len(), parts.len(), "weights and parts must pair up");
    weights
        .iter()
        .zip(parts)
        .fold(T::zero(), |acc, (&w, &p)| acc + w * p)
}
