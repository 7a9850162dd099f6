//! Pixel-level anomaly metrics (exact PR-curve area and FPR at 95% TPR) and
//! component-level metrics (sIoU, PPV, F1 over a threshold grid).
//!
//! Results depend only on score order and pixel counts, so everything is
//! reported as `f64` regardless of the score scalar type.

use crate::metrics::components::connected_components;
use crate::metrics::MetricsError;
use crate::model::BinaryMask;
use crate::scalar::Real;

/// F1 membership thresholds: 0.25 to 0.75 in steps of 0.05.
pub const F1_THRESHOLDS: [f64; 11] = [
    0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
];

fn check_scores<T: Real>(scores: &[T], gt: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let positives = gt.iter().filter(|&&g| g).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    Ok((positives, negatives))
}

/// Descending score order with index tie-break; stable across platforms.
fn descending_order<T: Real>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Exact area under the precision-recall curve, sweeping every distinct score
/// as a threshold (predict anomalous when score >= threshold) with step
/// interpolation. Higher scores mean more anomalous.
pub fn aupr<T: Real>(scores: &[T], gt: &[bool]) -> Result<f64, MetricsError> {
    let (positives, _) = check_scores(scores, gt)?;
    let order = descending_order(scores);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a curve point.
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Smallest false-positive rate among thresholds reaching a true-positive
/// rate of at least 95%.
pub fn fpr_at_95_tpr<T: Real>(scores: &[T], gt: &[bool]) -> Result<f64, MetricsError> {
    let (positives, negatives) = check_scores(scores, gt)?;
    let order = descending_order(scores);
    let mut best = 1.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / positives as f64;
        let fpr = fp as f64 / negatives as f64;
        if tpr >= 0.95 && fpr < best {
            best = fpr;
        }
    }
    Ok(best)
}

/// Mergeable component-level evidence: per ground-truth component sIoU
/// values, per predicted component PPV values, and TP/FP/FN counts per F1
/// threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentTally {
    pub siou: Vec<f64>,
    pub ppv: Vec<f64>,
    pub f1_counts: [(u64, u64, u64); F1_THRESHOLDS.len()],
}

impl ComponentTally {
    pub fn merge(&mut self, other: &ComponentTally) {
        self.siou.extend_from_slice(&other.siou);
        self.ppv.extend_from_slice(&other.ppv);
        for (a, b) in self.f1_counts.iter_mut().zip(&other.f1_counts) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
    }

    pub fn finalize(&self) -> ComponentReport {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let mut f1_sum = 0.0;
        let mut f1_defined = 0usize;
        for &(tp, fp, fn_count) in &self.f1_counts {
            let denom = 2 * tp + fp + fn_count;
            if denom > 0 {
                f1_sum += 2.0 * tp as f64 / denom as f64;
                f1_defined += 1;
            }
        }
        ComponentReport {
            mean_siou_gt: mean(&self.siou),
            mean_ppv: mean(&self.ppv),
            mean_f1: if f1_defined == 0 {
                None
            } else {
                Some(f1_sum / f1_defined as f64)
            },
        }
    }
}

/// The three component-level means; `None` marks an undefined metric (no
/// components on the relevant side), which is never folded into a mean as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentReport {
    pub mean_siou_gt: Option<f64>,
    pub mean_ppv: Option<f64>,
    pub mean_f1: Option<f64>,
}

/// Component evidence for one image. Pixels under `ignore` are removed from
/// both masks before components are built, so they contribute to no count.
pub fn component_tally(
    pred: &BinaryMask,
    gt: &BinaryMask,
    ignore: Option<&BinaryMask>,
) -> Result<ComponentTally, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch);
    }
    if let Some(ig) = ignore {
        if ig.shape() != gt.shape() {
            return Err(MetricsError::ShapeMismatch);
        }
    }
    let n = pred.values().len();
    let keep = |i: usize| ignore.is_none_or(|ig| !ig.values()[i]);
    let pred_bits: Vec<bool> = (0..n).map(|i| pred.values()[i] && keep(i)).collect();
    let gt_bits: Vec<bool> = (0..n).map(|i| gt.values()[i] && keep(i)).collect();

    let (gt_labels, gt_count) = connected_components(&gt_bits, gt.height(), gt.width());
    let (pred_labels, pred_count) = connected_components(&pred_bits, gt.height(), gt.width());

    // sIoU per gt component K: |K ∩ Q(K)| / |K ∪ (Q(K) \ U(K))|, where Q(K)
    // is the union of predicted components touching K and U(K) the union of
    // the other gt components.
    let mut siou = Vec::with_capacity(gt_count as usize);
    for g in 1..=gt_count {
        let mut touching = vec![false; pred_count as usize + 1];
        for i in 0..n {
            if gt_labels[i] == g && pred_labels[i] != 0 {
                touching[pred_labels[i] as usize] = true;
            }
        }
        let mut inter = 0u64;
        let mut denom = 0u64;
        for i in 0..n {
            let in_gt = gt_labels[i] == g;
            let in_q = pred_labels[i] != 0 && touching[pred_labels[i] as usize];
            if in_gt {
                denom += 1;
                if in_q {
                    inter += 1;
                }
            } else if in_q && gt_labels[i] == 0 {
                denom += 1;
            }
        }
        siou.push(inter as f64 / denom as f64);
    }

    // PPV per predicted component, symmetric to sIoU.
    let mut ppv = Vec::with_capacity(pred_count as usize);
    for q in 1..=pred_count {
        let mut touching = vec![false; gt_count as usize + 1];
        for i in 0..n {
            if pred_labels[i] == q && gt_labels[i] != 0 {
                touching[gt_labels[i] as usize] = true;
            }
        }
        let mut inter = 0u64;
        let mut denom = 0u64;
        for i in 0..n {
            let in_pred = pred_labels[i] == q;
            let in_g = gt_labels[i] != 0 && touching[gt_labels[i] as usize];
            if in_pred {
                denom += 1;
                if in_g {
                    inter += 1;
                }
            } else if in_g && pred_labels[i] == 0 {
                denom += 1;
            }
        }
        ppv.push(inter as f64 / denom as f64);
    }

    let mut f1_counts = [(0u64, 0u64, 0u64); F1_THRESHOLDS.len()];
    for (slot, &tau) in f1_counts.iter_mut().zip(&F1_THRESHOLDS) {
        let tp = siou.iter().filter(|&&v| v > tau).count() as u64;
        let fn_count = gt_count as u64 - tp;
        let fp = ppv.iter().filter(|&&v| v <= tau).count() as u64;
        *slot = (tp, fp, fn_count);
    }

    Ok(ComponentTally {
        siou,
        ppv,
        f1_counts,
    })
}

/// Single-image component-level means.
pub fn component_level(
    pred: &BinaryMask,
    gt: &BinaryMask,
    ignore: Option<&BinaryMask>,
) -> Result<ComponentReport, MetricsError> {
    Ok(component_tally(pred, gt, ignore)?.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rng::SplitMix64;

    #[test]
    fn perfect_separation_has_unit_aupr_and_zero_fpr() {
        let scores = vec![0.9, 0.8, 0.2, 0.1];
        let gt = vec![true, true, false, false];
        assert_eq!(aupr(&scores, &gt).unwrap(), 1.0);
        assert_eq!(fpr_at_95_tpr(&scores, &gt).unwrap(), 0.0);
    }

    #[test]
    fn inverted_scores_force_full_fpr() {
        let scores = vec![0.1, 0.2, 0.8, 0.9];
        let gt = vec![true, true, false, false];
        assert_eq!(fpr_at_95_tpr(&scores, &gt).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let scores = vec![0.5; 8];
        let gt = vec![true, false, false, true, false, false, false, false];
        assert!((aupr(&scores, &gt).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn three_point_case_matches_enumeration_oracle() {
        let scores = vec![0.9, 0.8, 0.3];
        let gt = vec![true, false, true];
        // Thresholds 0.9 / 0.8 / 0.3: (R, P) = (1/2, 1), (1/2, 1/2), (1, 2/3).
        let expected = 0.5 * 1.0 + 0.0 * 0.5 + 0.5 * (2.0 / 3.0);
        assert!((aupr(&scores, &gt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        assert!(matches!(
            aupr(&[0.5, 0.6], &[true, true]),
            Err(MetricsError::DegenerateLabels)
        ));
        assert!(matches!(
            fpr_at_95_tpr(&[0.5, 0.6], &[false, false]),
            Err(MetricsError::DegenerateLabels)
        ));
    }

    #[test]
    fn monotone_transform_leaves_rank_metrics_unchanged() {
        let mut rng = SplitMix64::new(61);
        let scores: Vec<f64> = (0..40)
            .map(|_| (rng.next_u64() % 10) as f64 / 10.0)
            .collect();
        let gt: Vec<bool> = (0..40).map(|_| rng.next_u64() % 3 == 0).collect();
        if gt.iter().all(|&g| g) || gt.iter().all(|&g| !g) {
            return;
        }
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
        assert_eq!(
            aupr(&scores, &gt).unwrap(),
            aupr(&transformed, &gt).unwrap()
        );
        assert_eq!(
            fpr_at_95_tpr(&scores, &gt).unwrap(),
            fpr_at_95_tpr(&transformed, &gt).unwrap()
        );
    }

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::new(
            rows.len(),
            rows[0].len(),
            rows.concat().iter().map(|&v| v != 0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_single_component_is_perfect() {
        let m = mask(&[&[0, 1, 1], &[0, 1, 0]]);
        let report = component_level(&m, &m, None).unwrap();
        assert_eq!(report.mean_siou_gt, Some(1.0));
        assert_eq!(report.mean_ppv, Some(1.0));
        assert_eq!(report.mean_f1, Some(1.0));
    }

    #[test]
    fn empty_prediction_leaves_ppv_undefined() {
        let gt = mask(&[&[1, 1], &[0, 0]]);
        let pred = mask(&[&[0, 0], &[0, 0]]);
        let report = component_level(&pred, &gt, None).unwrap();
        assert_eq!(report.mean_siou_gt, Some(0.0));
        assert_eq!(report.mean_ppv, None);
        assert_eq!(report.mean_f1, Some(0.0));
    }

    #[test]
    fn half_covered_two_blob_case() {
        // Two gt blobs; prediction covers exactly one of them.
        let gt = mask(&[&[1, 1, 0, 0, 1, 1], &[1, 1, 0, 0, 1, 1]]);
        let pred = mask(&[&[1, 1, 0, 0, 0, 0], &[1, 1, 0, 0, 0, 0]]);
        let report = component_level(&pred, &gt, None).unwrap();
        assert_eq!(report.mean_siou_gt, Some(0.5));
        assert_eq!(report.mean_ppv, Some(1.0));
        // TP = 1, FN = 1, FP = 0 at every threshold: F1 = 2/3.
        assert!((report.mean_f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn swapping_pred_and_gt_swaps_siou_and_ppv() {
        let a = mask(&[&[1, 1, 0, 0], &[1, 1, 0, 0]]);
        let b = mask(&[&[1, 0, 0, 1], &[1, 0, 0, 1]]);
        let ab = component_level(&a, &b, None).unwrap();
        let ba = component_level(&b, &a, None).unwrap();
        assert_eq!(ab.mean_siou_gt, ba.mean_ppv);
        assert_eq!(ab.mean_ppv, ba.mean_siou_gt);
    }

    #[test]
    fn ignored_pixels_carry_no_evidence() {
        let gt = mask(&[&[1, 1, 0, 0]]);
        let pred = mask(&[&[1, 1, 1, 0]]);
        let ignore = mask(&[&[0, 0, 1, 0]]);
        // With the spurious pred pixel ignored, pred == gt.
        let report = component_level(&pred, &gt, Some(&ignore)).unwrap();
        assert_eq!(report.mean_siou_gt, Some(1.0));
        assert_eq!(report.mean_ppv, Some(1.0));
    }

    #[test]
    fn adjusted_union_forgives_other_gt_overlap() {
        // One predicted blob spans two gt blobs separated by a gap; the part
        // of the prediction on the *other* gt component is excluded from the
        // union, the gap pixel is not.
        let gt = mask(&[&[1, 1, 0, 1, 1]]);
        let pred = mask(&[&[1, 1, 1, 1, 1]]);
        let tally = component_tally(&pred, &gt, None).unwrap();
        // For each gt blob: inter = 2, union = 2 (own) + 1 (gap) = 3.
        assert_eq!(tally.siou, vec![2.0 / 3.0, 2.0 / 3.0]);
    }
}
