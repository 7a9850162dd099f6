//! Instance-decoder losses over offset fields: soft masks around instance
//! centroids, the Lovász hinge on those masks, and divergence/curl penalties
//! robustified with the Geman-McClure loss.

use std::collections::BTreeSet;
use std::fmt;

use crate::model::instance_centroids;
use crate::model::{BinaryMask, InstanceMask, LossWeights, ModelError, OffsetField};
use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
pub enum OffsetError {
    ShapeMismatch,
    /// Finite differences need at least a 3x3 field.
    TooSmall {
        height: usize,
        width: usize,
    },
}

impl fmt::Display for OffsetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OffsetError::ShapeMismatch => write!(f, "raster shapes do not match"),
            OffsetError::TooSmall { height, width } => {
                write!(f, "field {height}x{width} too small for finite differences")
            }
        }
    }
}

impl std::error::Error for OffsetError {}

/// Degenerate inputs that yield a defined value of 0 instead of an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWarning {
    EmptyGroundTruth,
    NoInstances,
}

/// A loss value plus an optional degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub warning: Option<LossWarning>,
}

impl<T> LossValue<T> {
    fn clean(value: T) -> Self {
        Self {
            value,
            warning: None,
        }
    }
}

/// Per-pixel membership scores in `[0, 1]`, shaped like the source field.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<T> {
    height: usize,
    width: usize,
    scores: Vec<T>,
}

impl<T: Real> SoftMask<T> {
    pub fn new(height: usize, width: usize, scores: Vec<T>) -> Result<Self, ModelError> {
        if scores.len() != height * width {
            return Err(ModelError::LengthMismatch {
                expected: height * width,
                got: scores.len(),
            });
        }
        Ok(Self {
            height,
            width,
            scores,
        })
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

    pub fn score(&self, h: usize, w: usize) -> T {
        self.scores[h * self.width + w]
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }
}

/// Gaussian membership of each pixel's pointed-to location around `centroid`:
/// `exp(-||e_p - c||^2 / (2 eta^2))`.
pub fn soft_mask<T: Real>(field: &OffsetField<T>, centroid: [T; 2], eta: T) -> SoftMask<T> {
    assert!(eta > T::zero(), "eta must be positive");
    let two = real::<T>(2.0);
    let denom = two * eta * eta;
    let mut scores = Vec::with_capacity(field.height() * field.width());
    for h in 0..field.height() {
        for w in 0..field.width() {
            let e = field.pointed(h, w);
            let dh = e[0] - centroid[0];
            let dw = e[1] - centroid[1];
            scores.push((-(dh * dh + dw * dw) / denom).exp());
        }
    }
    SoftMask {
        height: field.height(),
        width: field.width(),
        scores,
    }
}

/// Lovász hinge of a soft mask against a binary ground-truth mask: hinge
/// errors on the `2f - 1` margins, sorted descending and dotted with the
/// gradient of the Jaccard-loss extension.
pub fn lovasz_hinge<T: Real>(
    soft: &SoftMask<T>,
    gt: &BinaryMask,
) -> Result<LossValue<T>, OffsetError> {
    if soft.shape() != gt.shape() {
        return Err(OffsetError::ShapeMismatch);
    }
    let positives = gt.count_true();
    if positives == 0 {
        return Ok(LossValue {
            value: T::zero(),
            warning: Some(LossWarning::EmptyGroundTruth),
        });
    }
    let two = real::<T>(2.0);
    let mut errors: Vec<(T, bool)> = soft
        .scores()
        .iter()
        .zip(gt.values())
        .map(|(&score, &inside)| {
            let margin = two * score - T::one();
            let signed = if inside { margin } else { -margin };
            ((T::one() - signed).max(T::zero()), inside)
        })
        .collect();
    // Descending by error; index order breaks ties deterministically.
    errors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let gts = real::<T>(positives as f64);
    let mut loss = T::zero();
    let mut tp = T::zero();
    let mut fp = T::zero();
    let mut prev_jaccard = T::zero();
    for (err, inside) in errors {
        if inside {
            tp = tp + T::one();
        } else {
            fp = fp + T::one();
        }
        let jaccard = T::one() - (gts - tp) / (gts + fp);
        loss = loss + err * (jaccard - prev_jaccard);
        prev_jaccard = jaccard;
    }
    Ok(LossValue::clean(loss))
}

/// Mean Lovász hinge over the instances of `instances`, each scored by the
/// soft mask around its own ground-truth centroid.
pub fn offset_loss<T: Real>(
    field: &OffsetField<T>,
    instances: &InstanceMask,
    eta: T,
) -> Result<LossValue<T>, OffsetError> {
    if field.shape() != instances.shape() {
        return Err(OffsetError::ShapeMismatch);
    }
    let ids: BTreeSet<u32> = instances
        .ids()
        .iter()
        .copied()
        .filter(|&id| id != 0)
        .collect();
    if ids.is_empty() {
        return Ok(LossValue {
            value: T::zero(),
            warning: Some(LossWarning::NoInstances),
        });
    }
    let centroids = instance_centroids(instances);
    let mut sum = T::zero();
    for &id in &ids {
        let c = centroids[&id];
        let soft = soft_mask(field, [real::<T>(c[0]), real::<T>(c[1])], eta);
        let gt = BinaryMask::from_fn(instances.height(), instances.width(), |h, w| {
            instances.id(h, w) == id
        });
        sum = sum + lovasz_hinge(&soft, &gt)?.value;
    }
    Ok(LossValue::clean(sum / real::<T>(ids.len() as f64)))
}

/// Geman-McClure robust loss at unit scale: `2x^2 / (x^2 + 4)`.
pub fn geman_mcclure<T: Real>(x: T) -> T {
    let two = real::<T>(2.0);
    let four = real::<T>(4.0);
    let sq = x * x;
    two * sq / (sq + four)
}

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    Forward,
    Backward,
}

/// One-dimensional derivative at index `i` of `n` samples. Central differences
/// on the interior fall back to one-sided at the borders; forward/backward
/// fall back to the opposite side at their terminal index. All variants are
/// exact on degree-1 polynomials.
fn deriv<T: Real>(get: impl Fn(usize) -> T, i: usize, n: usize, stencil: Stencil) -> T {
    debug_assert!(n >= 2);
    let half = real::<T>(0.5);
    match stencil {
        Stencil::Central => {
            if i == 0 {
                get(1) - get(0)
            } else if i == n - 1 {
                get(n - 1) - get(n - 2)
            } else {
                (get(i + 1) - get(i - 1)) * half
            }
        }
        Stencil::Forward => {
            if i == n - 1 {
                get(n - 1) - get(n - 2)
            } else {
                get(i + 1) - get(i)
            }
        }
        Stencil::Backward => {
            if i == 0 {
                get(1) - get(0)
            } else {
                get(i) - get(i - 1)
            }
        }
    }
}

fn check_size<T: Real>(field: &OffsetField<T>) -> Result<(), OffsetError> {
    if field.height() < 3 || field.width() < 3 {
        return Err(OffsetError::TooSmall {
            height: field.height(),
            width: field.width(),
        });
    }
    Ok(())
}

/// Divergence penalties: the robustified deviation of `div O` from the
/// perfect-sink value -2, and the auxiliary term enforcing equality of the
/// two diagonal partials.
pub fn divergence_losses<T: Real>(field: &OffsetField<T>) -> Result<(T, T), OffsetError> {
    check_size(field)?;
    let (height, width) = field.shape();
    let two = real::<T>(2.0);
    let mut main = T::zero();
    let mut aux = T::zero();
    for h in 0..height {
        for w in 0..width {
            let dh = deriv(|i| field.offset(i, w)[0], h, height, Stencil::Central);
            let dw = deriv(|j| field.offset(h, j)[1], w, width, Stencil::Central);
            main = main + geman_mcclure(dh + dw + two);
            aux = aux + geman_mcclure(dh - dw);
        }
    }
    let n = real::<T>((height * width) as f64);
    Ok((main / n, aux / n))
}

/// Curl penalties: the robustified curl itself, and an auxiliary term on the
/// difference of the two mixed partials computed with independent one-sided
/// stencils so the terms stay numerically distinct.
pub fn curl_losses<T: Real>(field: &OffsetField<T>) -> Result<(T, T), OffsetError> {
    check_size(field)?;
    let (height, width) = field.shape();
    let mut main = T::zero();
    let mut aux = T::zero();
    for h in 0..height {
        for w in 0..width {
            let dhw = deriv(|j| field.offset(h, j)[0], w, width, Stencil::Central);
            let dwh = deriv(|i| field.offset(i, w)[1], h, height, Stencil::Central);
            main = main + geman_mcclure(dhw - dwh);

            let dhw_f = deriv(|j| field.offset(h, j)[0], w, width, Stencil::Forward);
            let dwh_b = deriv(|i| field.offset(i, w)[1], h, height, Stencil::Backward);
            aux = aux + geman_mcclure(dhw_f - dwh_b);
        }
    }
    let n = real::<T>((height * width) as f64);
    Ok((main / n, aux / n))
}

/// Weighted sum of the five instance-decoder loss terms.
pub fn instance_loss_total<T: Real>(
    field: &OffsetField<T>,
    instances: &InstanceMask,
    weights: &LossWeights<T>,
) -> Result<LossValue<T>, OffsetError> {
    let off = offset_loss(field, instances, weights.eta)?;
    let (div, div_aux) = divergence_losses(field)?;
    let (curl, curl_aux) = curl_losses(field)?;
    let value = weights.offset * off.value
        + weights.divergence * div
        + weights.divergence_aux * div_aux
        + weights.curl * curl
        + weights.curl_aux * curl_aux;
    Ok(LossValue {
        value,
        warning: off.warning,
    })
}
