//! Task-level evaluation: mergeable per-task accumulators and the flat
//! key/value metric report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::metrics::anomaly::{aupr, component_tally, fpr_at_95_tpr, ComponentTally};
use crate::metrics::confusion::{completeness, homogeneity, ow_miou, OpenWorldConfusion};
use crate::metrics::panoptic::{open_set_tally, open_world_pq_tallies, PanopticTally};
use crate::metrics::MetricsError;
use crate::model::{BinaryMask, FeatureMap, InstanceMask, SemanticMask};
use crate::scalar::Real;

/// The four open-world benchmark tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Anomaly,
    OwSemantic,
    OsPanoptic,
    OwPanoptic,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "anomaly" => Some(TaskKind::Anomaly),
            "ow-semantic" => Some(TaskKind::OwSemantic),
            "os-panoptic" => Some(TaskKind::OsPanoptic),
            "ow-panoptic" => Some(TaskKind::OwPanoptic),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Anomaly => "anomaly",
            TaskKind::OwSemantic => "ow-semantic",
            TaskKind::OsPanoptic => "os-panoptic",
            TaskKind::OwPanoptic => "ow-panoptic",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A metric that may be undefined (empty denominator). Undefined entries are
/// reported explicitly and never silently folded into means as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined,
}

impl MetricValue {
    pub fn from_option(v: Option<f64>) -> Self {
        match v {
            Some(x) => MetricValue::Defined(x),
            None => MetricValue::Undefined,
        }
    }

    pub fn as_option(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(x) => Some(*x),
            MetricValue::Undefined => None,
        }
    }
}

/// Flat, sorted key/value report with byte-stable serialization: keys in
/// lexicographic order, floats at fixed 6 decimals, `null` for undefined.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    entries: BTreeMap<String, MetricValue>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, value: Option<f64>) {
        self.entries
            .insert(key.to_string(), MetricValue::from_option(value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.get(key).and_then(|v| v.as_option())
    }

    pub fn is_defined(&self, key: &str) -> bool {
        matches!(self.entries.get(key), Some(MetricValue::Defined(_)))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        let mut first = true;
        for (key, value) in &self.entries {
            if !first {
                out.push_str(",\n");
            }
            first = false;
            match value {
                MetricValue::Defined(v) => {
                    out.push_str(&format!("  \"{key}\": {v:.6}"));
                }
                MetricValue::Undefined => {
                    out.push_str(&format!("  \"{key}\": null"));
                }
            }
        }
        out.push_str("\n}\n");
        out
    }
}

/// Anomaly-task evidence: pooled pixel scores for AUPR/FPR95 and pooled
/// component statistics.
#[derive(Debug, Clone, Default)]
pub struct AnomalyAccumulator {
    scores: Vec<f64>,
    labels: Vec<bool>,
    components: ComponentTally,
}

impl AnomalyAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image: a per-pixel score map (`dim` 1, higher = more
    /// anomalous), the binarized prediction, the ground-truth anomaly mask,
    /// and an optional ignore region excluded from every count.
    pub fn add_image<T: Real>(
        &mut self,
        scores: &FeatureMap<T>,
        pred_mask: &BinaryMask,
        gt: &BinaryMask,
        ignore: Option<&BinaryMask>,
    ) -> Result<(), MetricsError> {
        if scores.dim() != 1 {
            return Err(MetricsError::BadScoreMap { dim: scores.dim() });
        }
        if scores.shape() != gt.shape() || pred_mask.shape() != gt.shape() {
            return Err(MetricsError::ShapeMismatch);
        }
        if let Some(ig) = ignore {
            if ig.shape() != gt.shape() {
                return Err(MetricsError::ShapeMismatch);
            }
        }
        for h in 0..gt.height() {
            for w in 0..gt.width() {
                if ignore.is_some_and(|ig| ig.get(h, w)) {
                    continue;
                }
                let s = scores.pixel(h, w)[0]
                    .to_f64()
                    .ok_or(MetricsError::NonFinite)?;
                self.scores.push(s);
                self.labels.push(gt.get(h, w));
            }
        }
        self.components
            .merge(&component_tally(pred_mask, gt, ignore)?);
        Ok(())
    }

    pub fn merge(&mut self, other: &AnomalyAccumulator) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
        self.components.merge(&other.components);
    }

    pub fn finalize(&self) -> Result<MetricReport, MetricsError> {
        let mut report = MetricReport::new();
        report.insert("AUPR", Some(aupr(&self.scores, &self.labels)?));
        report.insert("FPR95", Some(fpr_at_95_tpr(&self.scores, &self.labels)?));
        let comp = self.components.finalize();
        report.insert("sIoU_gt", comp.mean_siou_gt);
        report.insert("PPV", comp.mean_ppv);
        report.insert("meanF1", comp.mean_f1);
        Ok(report)
    }
}

/// Open-world semantic evidence: one merged confusion matrix. Predictions and
/// ground truth use the task encoding (0 = known, 1.. = novel classes); the
/// reported means cover the novel classes only.
#[derive(Debug, Clone)]
pub struct OwSemanticAccumulator {
    conf: OpenWorldConfusion,
    ignore_label: Option<u32>,
}

impl OwSemanticAccumulator {
    pub fn new(gt_classes: usize, ignore_label: Option<u32>) -> Self {
        Self {
            conf: OpenWorldConfusion::new(gt_classes),
            ignore_label,
        }
    }

    pub fn add_image(
        &mut self,
        pred: &SemanticMask,
        gt: &SemanticMask,
    ) -> Result<(), MetricsError> {
        let image =
            OpenWorldConfusion::from_masks(pred, gt, self.conf.gt_classes(), self.ignore_label)?;
        self.conf.merge(&image)
    }

    pub fn merge(&mut self, other: &OwSemanticAccumulator) -> Result<(), MetricsError> {
        self.conf.merge(&other.conf)
    }

    pub fn confusion(&self) -> &OpenWorldConfusion {
        &self.conf
    }

    pub fn finalize(&self) -> MetricReport {
        let mut report = MetricReport::new();
        let (miou, hom, com) = unknown_class_means(&self.conf);
        report.insert("mIoU_ow", miou);
        report.insert("Hom", hom);
        report.insert("Com", com);
        report
    }
}

/// Means of IoU, homogeneity, and completeness restricted to the novel
/// classes (ids >= 1; id 0 is the known area in the task encoding).
fn unknown_class_means(conf: &OpenWorldConfusion) -> (Option<f64>, Option<f64>, Option<f64>) {
    let iou = ow_miou(conf);
    let mean_over = |values: &[Option<f64>]| {
        let defined: Vec<f64> = values.iter().skip(1).filter_map(|v| *v).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    let miou = mean_over(&iou.per_class);
    let hom = mean_over(&homogeneity(conf).per);
    let com = mean_over(&completeness(conf).per);
    (miou, hom, com)
}

/// Open-set panoptic evidence: one pooled instance tally.
#[derive(Debug, Clone, Default)]
pub struct OsPanopticAccumulator {
    tally: PanopticTally,
}

impl OsPanopticAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(
        &mut self,
        pred_anomaly: &BinaryMask,
        pred_inst: &InstanceMask,
        gt_anomaly: &BinaryMask,
        gt_inst: &InstanceMask,
        ignore: Option<&BinaryMask>,
    ) -> Result<(), MetricsError> {
        self.tally.merge(&open_set_tally(
            pred_anomaly,
            pred_inst,
            gt_anomaly,
            gt_inst,
            ignore,
        )?);
        Ok(())
    }

    pub fn merge(&mut self, other: &OsPanopticAccumulator) {
        self.tally.merge(&other.tally);
    }

    pub fn finalize(&self) -> MetricReport {
        let mut report = MetricReport::new();
        report.insert("PQ_unk", self.tally.pq());
        report.insert("SQ_unk", self.tally.sq());
        report.insert("RQ_unk", self.tally.rq());
        report
    }
}

/// Open-world panoptic evidence. Class matching must be consistent across the
/// whole stream, so images are retained and matched against the merged
/// confusion matrix when finalizing.
#[derive(Debug, Clone)]
pub struct OwPanopticAccumulator {
    conf: OpenWorldConfusion,
    ignore_label: Option<u32>,
    thing_classes: BTreeSet<u32>,
    images: Vec<(SemanticMask, InstanceMask, SemanticMask, InstanceMask)>,
}

impl OwPanopticAccumulator {
    pub fn new(gt_classes: usize, thing_classes: BTreeSet<u32>, ignore_label: Option<u32>) -> Self {
        Self {
            conf: OpenWorldConfusion::new(gt_classes),
            ignore_label,
            thing_classes,
            images: Vec::new(),
        }
    }

    pub fn add_image(
        &mut self,
        pred_sem: &SemanticMask,
        pred_inst: &InstanceMask,
        gt_sem: &SemanticMask,
        gt_inst: &InstanceMask,
    ) -> Result<(), MetricsError> {
        let image = OpenWorldConfusion::from_masks(
            pred_sem,
            gt_sem,
            self.conf.gt_classes(),
            self.ignore_label,
        )?;
        self.conf.merge(&image)?;
        self.images.push((
            pred_sem.clone(),
            pred_inst.clone(),
            gt_sem.clone(),
            gt_inst.clone(),
        ));
        Ok(())
    }

    pub fn merge(&mut self, other: &OwPanopticAccumulator) -> Result<(), MetricsError> {
        self.conf.merge(&other.conf)?;
        self.images.extend(other.images.iter().cloned());
        Ok(())
    }

    pub fn finalize(&self) -> Result<MetricReport, MetricsError> {
        let matching = self.conf.row_matching();
        let mut pooled: BTreeMap<u32, PanopticTally> = BTreeMap::new();
        for (pred_sem, pred_inst, gt_sem, gt_inst) in &self.images {
            let tallies = open_world_pq_tallies(
                pred_sem,
                pred_inst,
                gt_sem,
                gt_inst,
                &matching,
                &self.thing_classes,
                self.ignore_label,
            )?;
            for (k, tally) in tallies {
                pooled.entry(k).or_default().merge(&tally);
            }
        }
        let mut total = PanopticTally::default();
        for tally in pooled.values() {
            total.merge(tally);
        }
        let mut report = MetricReport::new();
        report.insert("PQ", total.pq());
        report.insert("SQ", total.sq());
        report.insert("RQ", total.rq());
        let (miou, hom, com) = unknown_class_means(&self.conf);
        report.insert("mIoU_ow", miou);
        report.insert("Hom", hom);
        report.insert("Com", com);
        Ok(report)
    }
}
