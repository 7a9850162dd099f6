//! Open-world confusion matrix (predicted classes × ground-truth classes)
//! with argmax-row matching, plus mIoU, homogeneity, and completeness.

use crate::metrics::MetricsError;
use crate::model::SemanticMask;

/// K̃×K count matrix: rows are predicted class ids (grown on demand), columns
/// the fixed ground-truth classes. Mergeable by elementwise addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenWorldConfusion {
    rows: Vec<Vec<u64>>,
    gt_classes: usize,
}

impl OpenWorldConfusion {
    pub fn new(gt_classes: usize) -> Self {
        Self {
            rows: Vec::new(),
            gt_classes,
        }
    }

    pub fn gt_classes(&self) -> usize {
        self.gt_classes
    }

    /// Number of predicted-class rows allocated so far.
    pub fn pred_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn add(&mut self, pred: u32, gt: u32) -> Result<(), MetricsError> {
        let k = gt as usize;
        if k >= self.gt_classes {
            return Err(MetricsError::LabelOutOfRange {
                label: gt,
                bound: self.gt_classes,
            });
        }
        let i = pred as usize;
        if i >= self.rows.len() {
            self.rows.resize_with(i + 1, || vec![0; self.gt_classes]);
        }
        self.rows[i][k] += 1;
        Ok(())
    }

    pub fn count(&self, pred: usize, gt: usize) -> u64 {
        self.rows.get(pred).map_or(0, |row| row[gt])
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().sum()
    }

    pub fn from_masks(
        pred: &SemanticMask,
        gt: &SemanticMask,
        gt_classes: usize,
        ignore_label: Option<u32>,
    ) -> Result<Self, MetricsError> {
        if pred.shape() != gt.shape() {
            return Err(MetricsError::ShapeMismatch);
        }
        let mut conf = Self::new(gt_classes);
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if Some(g) == ignore_label {
                continue;
            }
            conf.add(p, g)?;
        }
        Ok(conf)
    }

    pub fn merge(&mut self, other: &OpenWorldConfusion) -> Result<(), MetricsError> {
        if self.gt_classes != other.gt_classes {
            return Err(MetricsError::ShapeMismatch);
        }
        if other.rows.len() > self.rows.len() {
            self.rows
                .resize_with(other.rows.len(), || vec![0; self.gt_classes]);
        }
        for (mine, theirs) in self.rows.iter_mut().zip(&other.rows) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Ground-truth class matched to each predicted row: `argmax(row_i)`,
    /// ties broken toward the lowest ground-truth index; `None` for rows
    /// without any pixel.
    pub fn row_matching(&self) -> Vec<Option<u32>> {
        self.rows
            .iter()
            .map(|row| {
                let mut best: Option<(u64, usize)> = None;
                for (k, &count) in row.iter().enumerate() {
                    if count > 0 && best.is_none_or(|(c, _)| count > c) {
                        best = Some((count, k));
                    }
                }
                best.map(|(_, k)| k as u32)
            })
            .collect()
    }
}

/// Per-ground-truth-class IoU under argmax-row matching and its mean over
/// the classes present. All rows matched to the same class pool their true
/// positives and their full predicted mass.
#[derive(Debug, Clone, PartialEq)]
pub struct OwIouReport {
    /// `None` for ground-truth classes without any pixel.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn ow_miou(conf: &OpenWorldConfusion) -> OwIouReport {
    let matching = conf.row_matching();
    let k_gt = conf.gt_classes();
    let mut tp = vec![0u64; k_gt];
    let mut predicted_mass = vec![0u64; k_gt];
    let mut gt_mass = vec![0u64; k_gt];
    for (i, row) in conf.rows.iter().enumerate() {
        for (k, &count) in row.iter().enumerate() {
            gt_mass[k] += count;
        }
        if let Some(m) = matching[i] {
            let m = m as usize;
            tp[m] += row[m];
            predicted_mass[m] += row.iter().sum::<u64>();
        }
    }
    let mut per_class = Vec::with_capacity(k_gt);
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..k_gt {
        if gt_mass[k] == 0 {
            per_class.push(None);
            continue;
        }
        let union = predicted_mass[k] + gt_mass[k] - tp[k];
        let iou = if union == 0 {
            0.0
        } else {
            tp[k] as f64 / union as f64
        };
        per_class.push(Some(iou));
        sum += iou;
        present += 1;
    }
    OwIouReport {
        per_class,
        mean: (present > 0).then(|| sum / present as f64),
    }
}

/// Per-row or per-column purity values plus their mean over non-empty entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    pub per: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

fn purity(values: impl Iterator<Item = (u64, u64)>) -> PurityReport {
    let mut per = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (max, total) in values {
        if total == 0 {
            per.push(None);
            continue;
        }
        let v = max as f64 / total as f64;
        per.push(Some(v));
        sum += v;
        count += 1;
    }
    PurityReport {
        per,
        mean: (count > 0).then(|| sum / count as f64),
    }
}

/// How pure each predicted class is: `max(row_i) / sum(row_i)`.
pub fn homogeneity(conf: &OpenWorldConfusion) -> PurityReport {
    purity(conf.rows.iter().map(|row| {
        (
            row.iter().copied().max().unwrap_or(0),
            row.iter().sum::<u64>(),
        )
    }))
}

/// How concentrated each ground-truth class is: `max(column_k) / sum(column_k)`.
pub fn completeness(conf: &OpenWorldConfusion) -> PurityReport {
    purity((0..conf.gt_classes()).map(|k| {
        let mut max = 0u64;
        let mut total = 0u64;
        for row in &conf.rows {
            max = max.max(row[k]);
            total += row[k];
        }
        (max, total)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf_from(rows: &[&[u64]]) -> OpenWorldConfusion {
        let gt_classes = rows[0].len();
        let mut conf = OpenWorldConfusion::new(gt_classes);
        for (i, row) in rows.iter().enumerate() {
            for (k, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    conf.add(i as u32, k as u32).unwrap();
                }
            }
        }
        conf
    }

    #[test]
    fn diagonal_matrix_is_perfect() {
        let conf = conf_from(&[&[5, 0], &[0, 7]]);
        let iou = ow_miou(&conf);
        assert_eq!(iou.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(iou.mean, Some(1.0));
        assert_eq!(homogeneity(&conf).mean, Some(1.0));
        assert_eq!(completeness(&conf).mean, Some(1.0));
    }

    #[test]
    fn single_off_diagonal_pixel_lands_where_expected() {
        let pred = SemanticMask::new(1, 1, vec![2]).unwrap();
        let gt = SemanticMask::new(1, 1, vec![1]).unwrap();
        let conf = OpenWorldConfusion::from_masks(&pred, &gt, 2, None).unwrap();
        assert_eq!(conf.count(2, 1), 1);
        assert_eq!(conf.total(), 1);
    }

    #[test]
    fn hand_computed_two_by_two_case() {
        let conf = conf_from(&[&[8, 2], &[1, 9]]);
        let iou = ow_miou(&conf);
        let iou0 = 8.0 / (10.0 + 9.0 - 8.0);
        let iou1 = 9.0 / (10.0 + 11.0 - 9.0);
        assert!((iou.per_class[0].unwrap() - iou0).abs() < 1e-12);
        assert!((iou.per_class[1].unwrap() - iou1).abs() < 1e-12);
        assert!((iou.mean.unwrap() - (iou0 + iou1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_gt_class_has_zero_iou() {
        // Both rows argmax-match gt 0; gt 1 has mass but no matched row.
        let conf = conf_from(&[&[8, 2], &[5, 3]]);
        let iou = ow_miou(&conf);
        assert_eq!(iou.per_class[1], Some(0.0));
    }

    #[test]
    fn absent_gt_class_is_excluded_from_mean() {
        let conf = conf_from(&[&[4, 0], &[1, 0]]);
        let iou = ow_miou(&conf);
        assert_eq!(iou.per_class[1], None);
        // Both rows pool into gt 0: TP = 5, predicted mass = 5, gt mass = 5.
        assert_eq!(iou.mean, Some(1.0));
        // With cross-class mass the pooled denominator grows.
        let split = conf_from(&[&[4, 2], &[1, 0]]);
        let iou = ow_miou(&split);
        assert!((iou.per_class[0].unwrap() - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_gt_index() {
        let conf = conf_from(&[&[3, 3]]);
        assert_eq!(conf.row_matching(), vec![Some(0)]);
    }

    #[test]
    fn purity_examples() {
        let conf = conf_from(&[&[8, 2], &[0, 0], &[1, 1]]);
        let hom = homogeneity(&conf);
        assert_eq!(hom.per[0], Some(0.8));
        assert_eq!(hom.per[1], None); // empty row excluded
        assert_eq!(hom.per[2], Some(0.5));
        assert_eq!(hom.mean, Some(0.65));

        let com = completeness(&conf);
        // Column 0: max 8, total 9; column 1: max 2, total 3.
        assert!((com.per[0].unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!((com.per[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_row_purity_is_one_over_k() {
        let conf = conf_from(&[&[2, 2, 2, 2]]);
        assert_eq!(homogeneity(&conf).per[0], Some(0.25));
    }

    #[test]
    fn merge_equals_concatenation() {
        let pred_a = SemanticMask::new(1, 3, vec![0, 1, 1]).unwrap();
        let gt_a = SemanticMask::new(1, 3, vec![0, 1, 0]).unwrap();
        let pred_b = SemanticMask::new(1, 2, vec![2, 0]).unwrap();
        let gt_b = SemanticMask::new(1, 2, vec![1, 0]).unwrap();

        let mut merged = OpenWorldConfusion::from_masks(&pred_a, &gt_a, 2, None).unwrap();
        merged
            .merge(&OpenWorldConfusion::from_masks(&pred_b, &gt_b, 2, None).unwrap())
            .unwrap();

        let pred_cat = SemanticMask::new(1, 5, vec![0, 1, 1, 2, 0]).unwrap();
        let gt_cat = SemanticMask::new(1, 5, vec![0, 1, 0, 1, 0]).unwrap();
        let concat = OpenWorldConfusion::from_masks(&pred_cat, &gt_cat, 2, None).unwrap();
        assert_eq!(merged, concat);
    }

    #[test]
    fn ignored_gt_label_is_skipped() {
        let pred = SemanticMask::new(1, 2, vec![0, 1]).unwrap();
        let gt = SemanticMask::new(1, 2, vec![0, 255]).unwrap();
        let conf = OpenWorldConfusion::from_masks(&pred, &gt, 2, Some(255)).unwrap();
        assert_eq!(conf.total(), 1);
    }
}
