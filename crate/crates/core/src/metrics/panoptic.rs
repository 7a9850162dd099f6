//! Panoptic quality for the open-set task (known area as stuff, instances
//! inside the anomaly region) and the open-world task (argmax class mapping,
//! things matched instance-wise, stuff matched region-wise).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::metrics::confusion::OpenWorldConfusion;
use crate::metrics::MetricsError;
use crate::model::{BinaryMask, InstanceMask, SemanticMask};

/// Matched-pair IoU mass and TP/FP/FN counts; mergeable across images and
/// classes. PQ factorizes exactly as SQ × RQ on any tally.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PanopticTally {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
}

impl PanopticTally {
    pub fn merge(&mut self, other: &PanopticTally) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_count += other.fn_count;
    }

    fn denominator(&self) -> f64 {
        self.tp as f64 + 0.5 * (self.fp + self.fn_count) as f64
    }

    pub fn pq(&self) -> Option<f64> {
        let d = self.denominator();
        (d > 0.0).then(|| self.iou_sum / d)
    }

    pub fn sq(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.iou_sum / self.tp as f64)
    }

    pub fn rq(&self) -> Option<f64> {
        let d = self.denominator();
        (d > 0.0).then(|| self.tp as f64 / d)
    }

    pub fn report(&self) -> PqReport {
        PqReport {
            pq: self.pq(),
            sq: self.sq(),
            rq: self.rq(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqReport {
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
}

/// Pixel sets per instance id (ignored pixels dropped); instances that end up
/// empty disappear.
fn instance_sets(inst: &InstanceMask, ignore: Option<&BinaryMask>) -> BTreeMap<u32, u64> {
    let mut sizes = BTreeMap::new();
    for h in 0..inst.height() {
        for w in 0..inst.width() {
            if let Some(ig) = ignore {
                if ig.get(h, w) {
                    continue;
                }
            }
            let id = inst.id(h, w);
            if id != 0 {
                *sizes.entry(id).or_insert(0u64) += 1;
            }
        }
    }
    sizes
}

/// One-to-one matching of instances with IoU > 0.5 (unique by the overlap
/// theorem). IoUs are accumulated in ground-truth id order.
fn match_instances(
    pred: &InstanceMask,
    gt: &InstanceMask,
    ignore: Option<&BinaryMask>,
    pred_keep: impl Fn(u32) -> bool,
    gt_keep: impl Fn(u32) -> bool,
) -> PanopticTally {
    let pred_sizes = instance_sets(pred, ignore);
    let gt_sizes = instance_sets(gt, ignore);
    let mut overlap: HashMap<(u32, u32), u64> = HashMap::new();
    for h in 0..pred.height() {
        for w in 0..pred.width() {
            if let Some(ig) = ignore {
                if ig.get(h, w) {
                    continue;
                }
            }
            let p = pred.id(h, w);
            let g = gt.id(h, w);
            if p != 0 && g != 0 {
                *overlap.entry((p, g)).or_insert(0) += 1;
            }
        }
    }

    let pred_ids: Vec<u32> = pred_sizes
        .keys()
        .copied()
        .filter(|&p| pred_keep(p))
        .collect();
    let gt_ids: Vec<u32> = gt_sizes.keys().copied().filter(|&g| gt_keep(g)).collect();

    let mut tally = PanopticTally::default();
    let mut matched_pred: BTreeSet<u32> = BTreeSet::new();
    for &g in &gt_ids {
        let mut matched = false;
        for &p in &pred_ids {
            let inter = *overlap.get(&(p, g)).unwrap_or(&0);
            if inter == 0 {
                continue;
            }
            let union = pred_sizes[&p] + gt_sizes[&g] - inter;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                tally.iou_sum += iou;
                tally.tp += 1;
                matched_pred.insert(p);
                matched = true;
                break; // IoU > 0.5 match is unique
            }
        }
        if !matched {
            tally.fn_count += 1;
        }
    }
    tally.fp += pred_ids
        .iter()
        .filter(|p| !matched_pred.contains(p))
        .count() as u64;
    tally
}

fn check_os_inputs(
    anomaly: &BinaryMask,
    inst: &InstanceMask,
    ignore: Option<&BinaryMask>,
) -> Result<(), MetricsError> {
    if anomaly.shape() != inst.shape() {
        return Err(MetricsError::ShapeMismatch);
    }
    // Instances must live inside their own unknown region.
    for h in 0..inst.height() {
        for w in 0..inst.width() {
            if let Some(ig) = ignore {
                if ig.get(h, w) {
                    continue;
                }
            }
            if inst.id(h, w) != 0 && !anomaly.get(h, w) {
                return Err(MetricsError::InconsistentPanoptic {
                    instance: inst.id(h, w),
                });
            }
        }
    }
    Ok(())
}

/// Open-set panoptic tally: class-agnostic instances inside the anomaly
/// masks, matched one-to-one at IoU > 0.5. The known area acts as a single
/// stuff segment whose quality is excluded from these unknown-only counts.
pub fn open_set_tally(
    pred_anomaly: &BinaryMask,
    pred_inst: &InstanceMask,
    gt_anomaly: &BinaryMask,
    gt_inst: &InstanceMask,
    ignore: Option<&BinaryMask>,
) -> Result<PanopticTally, MetricsError> {
    if pred_anomaly.shape() != gt_anomaly.shape() {
        return Err(MetricsError::ShapeMismatch);
    }
    check_os_inputs(pred_anomaly, pred_inst, ignore)?;
    check_os_inputs(gt_anomaly, gt_inst, ignore)?;
    Ok(match_instances(
        pred_inst,
        gt_inst,
        ignore,
        |_| true,
        |_| true,
    ))
}

/// Open-set panoptic quality over one image pair.
pub fn open_set_pq(
    pred_anomaly: &BinaryMask,
    pred_inst: &InstanceMask,
    gt_anomaly: &BinaryMask,
    gt_inst: &InstanceMask,
    ignore: Option<&BinaryMask>,
) -> Result<PqReport, MetricsError> {
    Ok(open_set_tally(pred_anomaly, pred_inst, gt_anomaly, gt_inst, ignore)?.report())
}

/// Aggregated open-world panoptic quality. Per-class values each satisfy
/// PQ = SQ × RQ; the headline numbers are pooled over all classes' tallies so
/// the identity also holds exactly in aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct OwPqReport {
    pub per_class: BTreeMap<u32, PqReport>,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
}

/// Instance to semantic class over non-ignored pixels, erroring if an
/// instance spans two classes there.
fn check_consistent(
    sem: &SemanticMask,
    inst: &InstanceMask,
    ignore: Option<&BinaryMask>,
) -> Result<BTreeMap<u32, u32>, MetricsError> {
    let mut classes: BTreeMap<u32, u32> = BTreeMap::new();
    for h in 0..inst.height() {
        for w in 0..inst.width() {
            if ignore.is_some_and(|ig| ig.get(h, w)) {
                continue;
            }
            let id = inst.id(h, w);
            if id == 0 {
                continue;
            }
            let class = sem.label(h, w);
            match classes.get(&id) {
                None => {
                    classes.insert(id, class);
                }
                Some(&first) if first != class => {
                    return Err(MetricsError::InconsistentPanoptic { instance: id });
                }
                Some(_) => {}
            }
        }
    }
    Ok(classes)
}

/// Per-ground-truth-class tallies for one image pair under a fixed predicted
/// class → ground-truth class mapping (use the merged-confusion matching for
/// dataset-level consistency).
///
/// Masks are in the open-world task encoding, so label 0 marks the known
/// area, not a category: like the known-stuff segment of the open-set task,
/// its quality is excluded from the tallies, which cover the novel classes
/// only. Thing classes match instances as in the open-set case; stuff
/// classes match their full regions at IoU > 0.5. Predicted instances whose
/// class maps to a stuff class (or to the known area) are not tallied; the
/// region IoU already penalizes them.
pub fn open_world_pq_tallies(
    pred_sem: &SemanticMask,
    pred_inst: &InstanceMask,
    gt_sem: &SemanticMask,
    gt_inst: &InstanceMask,
    row_matching: &[Option<u32>],
    thing_classes: &BTreeSet<u32>,
    ignore_label: Option<u32>,
) -> Result<BTreeMap<u32, PanopticTally>, MetricsError> {
    if pred_sem.shape() != gt_sem.shape()
        || pred_sem.shape() != pred_inst.shape()
        || gt_sem.shape() != gt_inst.shape()
    {
        return Err(MetricsError::ShapeMismatch);
    }

    let ignore = ignore_label.map(|label| {
        BinaryMask::from_fn(gt_sem.height(), gt_sem.width(), |h, w| {
            gt_sem.label(h, w) == label
        })
    });
    let ignore_ref = ignore.as_ref();

    // Panoptic consistency over the evaluated pixels; ground-truth instances
    // may extend under the ignore region.
    let pred_class_of = check_consistent(pred_sem, pred_inst, ignore_ref)?;
    let gt_class_of = check_consistent(gt_sem, gt_inst, ignore_ref)?;

    let map_pred =
        |label: u32| -> Option<u32> { row_matching.get(label as usize).copied().flatten() };

    // Ground-truth classes partaking in the evaluation; 0 is the known area.
    let mut classes: BTreeSet<u32> = BTreeSet::new();
    for h in 0..gt_sem.height() {
        for w in 0..gt_sem.width() {
            if ignore_ref.is_none_or(|ig| !ig.get(h, w)) {
                classes.insert(gt_sem.label(h, w));
                if let Some(k) = map_pred(pred_sem.label(h, w)) {
                    classes.insert(k);
                }
            }
        }
    }
    classes.remove(&0);

    let mut tallies: BTreeMap<u32, PanopticTally> = BTreeMap::new();
    for &k in &classes {
        let tally = if thing_classes.contains(&k) {
            match_instances(
                pred_inst,
                gt_inst,
                ignore_ref,
                |p| pred_class_of.get(&p).copied().and_then(map_pred) == Some(k),
                |g| gt_class_of.get(&g).copied() == Some(k),
            )
        } else {
            // Stuff: one segment per side, matched iff IoU > 0.5.
            let mut inter = 0u64;
            let mut pred_size = 0u64;
            let mut gt_size = 0u64;
            for h in 0..gt_sem.height() {
                for w in 0..gt_sem.width() {
                    if ignore_ref.is_some_and(|ig| ig.get(h, w)) {
                        continue;
                    }
                    let in_pred = map_pred(pred_sem.label(h, w)) == Some(k);
                    let in_gt = gt_sem.label(h, w) == k;
                    pred_size += in_pred as u64;
                    gt_size += in_gt as u64;
                    inter += (in_pred && in_gt) as u64;
                }
            }
            let mut tally = PanopticTally::default();
            let union = pred_size + gt_size - inter;
            let iou = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            if iou > 0.5 {
                tally.iou_sum = iou;
                tally.tp = 1;
            } else {
                if gt_size > 0 {
                    tally.fn_count = 1;
                }
                if pred_size > 0 {
                    tally.fp = 1;
                }
            }
            tally
        };
        tallies.insert(k, tally);
    }
    Ok(tallies)
}

/// Single-image open-world panoptic quality; the class mapping comes from
/// this image pair's own confusion matrix.
pub fn open_world_pq(
    pred_sem: &SemanticMask,
    pred_inst: &InstanceMask,
    gt_sem: &SemanticMask,
    gt_inst: &InstanceMask,
    thing_classes: &BTreeSet<u32>,
    gt_classes: usize,
    ignore_label: Option<u32>,
) -> Result<OwPqReport, MetricsError> {
    let conf = OpenWorldConfusion::from_masks(pred_sem, gt_sem, gt_classes, ignore_label)?;
    let tallies = open_world_pq_tallies(
        pred_sem,
        pred_inst,
        gt_sem,
        gt_inst,
        &conf.row_matching(),
        thing_classes,
        ignore_label,
    )?;
    Ok(finalize_ow_pq(&tallies))
}

pub fn finalize_ow_pq(tallies: &BTreeMap<u32, PanopticTally>) -> OwPqReport {
    let mut pooled = PanopticTally::default();
    let mut per_class = BTreeMap::new();
    for (&k, tally) in tallies {
        pooled.merge(tally);
        per_class.insert(k, tally.report());
    }
    OwPqReport {
        per_class,
        pq: pooled.pq(),
        sq: pooled.sq(),
        rq: pooled.rq(),
    }
}
