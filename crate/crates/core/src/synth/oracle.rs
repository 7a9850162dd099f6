//! Brute-force metric oracles: every benchmark metric recomputed by
//! exhaustive enumeration on desk-scale inputs, independent of the
//! production implementations in [`crate::metrics`].
//!
//! Thresholds are full rescans per distinct score, components come from
//! flood fill and explicit set algebra, and panoptic matches are enumerated
//! over all instance pairs with the uniqueness of >0.5 matches asserted.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::metrics::{MetricReport, F1_THRESHOLDS};
use crate::model::{BinaryMask, FeatureMap, InstanceMask, SemanticMask};
use crate::synth::SynthError;

const MAX_PIXELS: usize = 64 * 64;
const MAX_CLASSES: usize = 8;
const MAX_INSTANCES: usize = 8;

fn check_size(height: usize, width: usize) -> Result<(), SynthError> {
    if height * width > MAX_PIXELS {
        return Err(SynthError::TooLarge);
    }
    Ok(())
}

fn check_instance_count(inst: &InstanceMask) -> Result<(), SynthError> {
    let ids: BTreeSet<u32> = inst.ids().iter().copied().filter(|&i| i != 0).collect();
    if ids.len() > MAX_INSTANCES {
        return Err(SynthError::TooLarge);
    }
    Ok(())
}

/// One anomaly-task image: score map (dim 1), binarized prediction,
/// ground-truth anomaly, optional ignore region.
pub type AnomalyImage<'a> = (
    &'a FeatureMap<f64>,
    &'a BinaryMask,
    &'a BinaryMask,
    Option<&'a BinaryMask>,
);

pub fn oracle_anomaly(images: &[AnomalyImage<'_>]) -> Result<MetricReport, SynthError> {
    // Pool scores and labels over the dataset.
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (score_map, _, gt, ignore) in images {
        check_size(gt.height(), gt.width())?;
        for h in 0..gt.height() {
            for w in 0..gt.width() {
                if ignore.is_some_and(|ig| ig.get(h, w)) {
                    continue;
                }
                scores.push(score_map.pixel(h, w)[0]);
                labels.push(gt.get(h, w));
            }
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(SynthError::InvalidSpec(
            "oracle needs at least one positive and one negative pixel".into(),
        ));
    }

    // Every distinct score is a threshold; classify by full rescan.
    let mut thresholds: Vec<f64> = scores.clone();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut fpr95 = 1.0f64;
    for &t in &thresholds {
        let mut tp = 0u64;
        let mut fp = 0u64;
        for (&s, &l) in scores.iter().zip(&labels) {
            if s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        let fpr = fp as f64 / negatives as f64;
        if recall >= 0.95 && fpr < fpr95 {
            fpr95 = fpr;
        }
    }

    // Component metrics from explicit pixel sets, pooled over images.
    let mut siou_values = Vec::new();
    let mut ppv_values = Vec::new();
    for (_, pred, gt, ignore) in images {
        let keep = |h: usize, w: usize| !ignore.is_some_and(|ig| ig.get(h, w));
        let gt_comps = flood_components(gt, &keep);
        let pred_comps = flood_components(pred, &keep);
        let gt_union: HashSet<(usize, usize)> = gt_comps.iter().flatten().copied().collect();
        let pred_union: HashSet<(usize, usize)> = pred_comps.iter().flatten().copied().collect();

        for comp in &gt_comps {
            let touching: Vec<&HashSet<(usize, usize)>> = pred_comps
                .iter()
                .filter(|p| p.intersection(comp).next().is_some())
                .collect();
            let q: HashSet<(usize, usize)> = touching.into_iter().flatten().copied().collect();
            let others: HashSet<(usize, usize)> = gt_union.difference(comp).copied().collect();
            let inter = comp.intersection(&q).count();
            let adjusted: HashSet<(usize, usize)> = q.difference(&others).copied().collect();
            let union = comp.union(&adjusted).count();
            siou_values.push(inter as f64 / union as f64);
        }
        for comp in &pred_comps {
            let touching: Vec<&HashSet<(usize, usize)>> = gt_comps
                .iter()
                .filter(|g| g.intersection(comp).next().is_some())
                .collect();
            let g: HashSet<(usize, usize)> = touching.into_iter().flatten().copied().collect();
            let others: HashSet<(usize, usize)> = pred_union.difference(comp).copied().collect();
            let inter = comp.intersection(&g).count();
            let adjusted: HashSet<(usize, usize)> = g.difference(&others).copied().collect();
            let union = comp.union(&adjusted).count();
            ppv_values.push(inter as f64 / union as f64);
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut f1_sum = 0.0;
    let mut f1_defined = 0;
    for &tau in &F1_THRESHOLDS {
        let tp = siou_values.iter().filter(|&&v| v > tau).count() as u64;
        let fn_count = siou_values.len() as u64 - tp;
        let fp = ppv_values.iter().filter(|&&v| v <= tau).count() as u64;
        let denom = 2 * tp + fp + fn_count;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
            f1_defined += 1;
        }
    }

    let mut report = MetricReport::new();
    report.insert("AUPR", Some(area));
    report.insert("FPR95", Some(fpr95));
    report.insert("sIoU_gt", mean(&siou_values));
    report.insert("PPV", mean(&ppv_values));
    report.insert(
        "meanF1",
        (f1_defined > 0).then(|| f1_sum / f1_defined as f64),
    );
    Ok(report)
}

/// 8-connected components by flood fill, as coordinate sets.
fn flood_components(
    mask: &BinaryMask,
    keep: &dyn Fn(usize, usize) -> bool,
) -> Vec<HashSet<(usize, usize)>> {
    let mut seen = vec![false; mask.height() * mask.width()];
    let mut components = Vec::new();
    for h in 0..mask.height() {
        for w in 0..mask.width() {
            let idx = h * mask.width() + w;
            if seen[idx] || !mask.get(h, w) || !keep(h, w) {
                continue;
            }
            let mut component = HashSet::new();
            let mut queue = vec![(h, w)];
            seen[idx] = true;
            while let Some((ch, cw)) = queue.pop() {
                component.insert((ch, cw));
                for dh in -1i64..=1 {
                    for dw in -1i64..=1 {
                        let nh = ch as i64 + dh;
                        let nw = cw as i64 + dw;
                        if nh < 0
                            || nw < 0
                            || nh >= mask.height() as i64
                            || nw >= mask.width() as i64
                        {
                            continue;
                        }
                        let (nh, nw) = (nh as usize, nw as usize);
                        let nidx = nh * mask.width() + nw;
                        if !seen[nidx] && mask.get(nh, nw) && keep(nh, nw) {
                            seen[nidx] = true;
                            queue.push((nh, nw));
                        }
                    }
                }
            }
            components.push(component);
        }
    }
    components
}

/// Brute-force confusion counts: one full rescan per (pred, gt) pair.
fn brute_confusion(
    images: &[(&SemanticMask, &SemanticMask)],
    gt_classes: usize,
    ignore_label: Option<u32>,
) -> Result<Vec<Vec<u64>>, SynthError> {
    if gt_classes > MAX_CLASSES {
        return Err(SynthError::TooLarge);
    }
    let mut max_pred = 0u32;
    for (pred, gt) in images {
        check_size(gt.height(), gt.width())?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if Some(g) != ignore_label {
                max_pred = max_pred.max(p);
                if g as usize >= gt_classes {
                    return Err(SynthError::InvalidSpec(format!(
                        "gt label {g} out of range"
                    )));
                }
            }
        }
    }
    let rows = max_pred as usize + 1;
    let mut counts = vec![vec![0u64; gt_classes]; rows];
    for i in 0..rows {
        for k in 0..gt_classes {
            for (pred, gt) in images {
                for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
                    if Some(g) != ignore_label && p as usize == i && g as usize == k {
                        counts[i][k] += 1;
                    }
                }
            }
        }
    }
    Ok(counts)
}

fn brute_row_matching(counts: &[Vec<u64>]) -> Vec<Option<usize>> {
    counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return None;
            }
            let mut best = 0usize;
            for k in 0..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            Some(best)
        })
        .collect()
}

/// Unknown-only means of IoU, homogeneity, completeness from brute counts
/// (class / row 0 is the known area in the task encoding).
fn brute_unknown_means(counts: &[Vec<u64>]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let gt_classes = counts.first().map_or(0, |r| r.len());
    let matching = brute_row_matching(counts);

    let mut ious = Vec::new();
    for k in 1..gt_classes {
        let gt_mass: u64 = counts.iter().map(|row| row[k]).sum();
        if gt_mass == 0 {
            continue;
        }
        let mut tp = 0u64;
        let mut pred_mass = 0u64;
        for (i, row) in counts.iter().enumerate() {
            if matching[i] == Some(k) {
                tp += row[k];
                pred_mass += row.iter().sum::<u64>();
            }
        }
        let union = pred_mass + gt_mass - tp;
        ious.push(if union == 0 {
            0.0
        } else {
            tp as f64 / union as f64
        });
    }

    let mut homs = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        if i == 0 {
            continue;
        }
        let total: u64 = row.iter().sum();
        if total > 0 {
            homs.push(*row.iter().max().unwrap() as f64 / total as f64);
        }
    }

    let mut coms = Vec::new();
    for k in 1..gt_classes {
        let total: u64 = counts.iter().map(|row| row[k]).sum();
        if total > 0 {
            let max = counts.iter().map(|row| row[k]).max().unwrap();
            coms.push(max as f64 / total as f64);
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    (mean(&ious), mean(&homs), mean(&coms))
}

pub fn oracle_ow_semantic(
    images: &[(&SemanticMask, &SemanticMask)],
    gt_classes: usize,
    ignore_label: Option<u32>,
) -> Result<MetricReport, SynthError> {
    let counts = brute_confusion(images, gt_classes, ignore_label)?;
    let (miou, hom, com) = brute_unknown_means(&counts);
    let mut report = MetricReport::new();
    report.insert("mIoU_ow", miou);
    report.insert("Hom", hom);
    report.insert("Com", com);
    Ok(report)
}

fn pixel_set(
    inst: &InstanceMask,
    id: u32,
    keep: &dyn Fn(usize, usize) -> bool,
) -> HashSet<(usize, usize)> {
    let mut set = HashSet::new();
    for h in 0..inst.height() {
        for w in 0..inst.width() {
            if inst.id(h, w) == id && keep(h, w) {
                set.insert((h, w));
            }
        }
    }
    set
}

fn iou_of(a: &HashSet<(usize, usize)>, b: &HashSet<(usize, usize)>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// All >0.5 matches between two instance lists; asserts the matching is
/// one-to-one, which the overlap theorem guarantees.
fn brute_matches(
    pred_sets: &BTreeMap<u32, HashSet<(usize, usize)>>,
    gt_sets: &BTreeMap<u32, HashSet<(usize, usize)>>,
) -> (f64, u64, u64, u64) {
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    let mut iou_sum = 0.0;
    let mut tp = 0u64;
    for (&g, gset) in gt_sets {
        for (&p, pset) in pred_sets {
            let iou = iou_of(pset, gset);
            if iou > 0.5 {
                assert!(
                    matched_gt.insert(g) && matched_pred.insert(p),
                    "matches above 0.5 IoU must be unique"
                );
                iou_sum += iou;
                tp += 1;
            }
        }
    }
    let fp = pred_sets.len() as u64 - matched_pred.len() as u64;
    let fn_count = gt_sets.len() as u64 - matched_gt.len() as u64;
    (iou_sum, tp, fp, fn_count)
}

/// One open-set panoptic image: predicted (anomaly, instances) and
/// ground-truth (anomaly, instances), plus an optional ignore region.
pub type OsPanopticImage<'a> = (
    &'a BinaryMask,
    &'a InstanceMask,
    &'a BinaryMask,
    &'a InstanceMask,
    Option<&'a BinaryMask>,
);

pub fn oracle_os_panoptic(images: &[OsPanopticImage<'_>]) -> Result<MetricReport, SynthError> {
    let mut iou_sum = 0.0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_count = 0u64;
    for (_, pred_inst, _, gt_inst, ignore) in images {
        check_size(gt_inst.height(), gt_inst.width())?;
        check_instance_count(pred_inst)?;
        check_instance_count(gt_inst)?;
        let keep = |h: usize, w: usize| !ignore.is_some_and(|ig| ig.get(h, w));
        let ids = |inst: &InstanceMask| -> BTreeMap<u32, HashSet<(usize, usize)>> {
            let mut sets = BTreeMap::new();
            for &id in inst.ids() {
                if id != 0 && !sets.contains_key(&id) {
                    let set = pixel_set(inst, id, &keep);
                    if !set.is_empty() {
                        sets.insert(id, set);
                    }
                }
            }
            sets
        };
        let (iou, t, f, n) = brute_matches(&ids(pred_inst), &ids(gt_inst));
        iou_sum += iou;
        tp += t;
        fp += f;
        fn_count += n;
    }
    let denom = tp as f64 + 0.5 * (fp + fn_count) as f64;
    let mut report = MetricReport::new();
    report.insert("PQ_unk", (denom > 0.0).then(|| iou_sum / denom));
    report.insert("SQ_unk", (tp > 0).then(|| iou_sum / tp as f64));
    report.insert("RQ_unk", (denom > 0.0).then(|| tp as f64 / denom));
    Ok(report)
}

/// One open-world panoptic image: predicted (semantic, instances) and
/// ground-truth (semantic, instances).
pub type OwPanopticImage<'a> = (
    &'a SemanticMask,
    &'a InstanceMask,
    &'a SemanticMask,
    &'a InstanceMask,
);

pub fn oracle_ow_panoptic(
    images: &[OwPanopticImage<'_>],
    gt_classes: usize,
    thing_classes: &BTreeSet<u32>,
    ignore_label: Option<u32>,
) -> Result<MetricReport, SynthError> {
    let sem_pairs: Vec<(&SemanticMask, &SemanticMask)> =
        images.iter().map(|(ps, _, gs, _)| (*ps, *gs)).collect();
    let counts = brute_confusion(&sem_pairs, gt_classes, ignore_label)?;
    let matching = brute_row_matching(&counts);
    let map_pred = |label: u32| -> Option<u32> {
        matching
            .get(label as usize)
            .copied()
            .flatten()
            .map(|k| k as u32)
    };

    // Pool per-class tallies over images.
    let mut per_class: BTreeMap<u32, (f64, u64, u64, u64)> = BTreeMap::new();
    for (pred_sem, pred_inst, gt_sem, gt_inst) in images {
        check_instance_count(pred_inst)?;
        check_instance_count(gt_inst)?;
        let keep =
            |h: usize, w: usize| ignore_label.is_none_or(|label| gt_sem.label(h, w) != label);

        let mut classes: BTreeSet<u32> = BTreeSet::new();
        for h in 0..gt_sem.height() {
            for w in 0..gt_sem.width() {
                if keep(h, w) {
                    classes.insert(gt_sem.label(h, w));
                    if let Some(k) = map_pred(pred_sem.label(h, w)) {
                        classes.insert(k);
                    }
                }
            }
        }
        // Label 0 is the known area, excluded from the novel-class tallies.
        classes.remove(&0);

        // Instance class = the semantic label under the instance on the
        // evaluated pixels; assert panoptic consistency while reading it.
        let class_of = |inst: &InstanceMask, sem: &SemanticMask| {
            let mut out: BTreeMap<u32, u32> = BTreeMap::new();
            for h in 0..inst.height() {
                for w in 0..inst.width() {
                    let id = inst.id(h, w);
                    if id == 0 || !keep(h, w) {
                        continue;
                    }
                    let class = sem.label(h, w);
                    let prev = out.insert(id, class);
                    assert!(
                        prev.is_none() || prev == Some(class),
                        "inconsistent instance"
                    );
                }
            }
            out
        };
        let pred_classes = class_of(pred_inst, pred_sem);
        let gt_classes_of = class_of(gt_inst, gt_sem);

        for &k in &classes {
            let entry = per_class.entry(k).or_insert((0.0, 0, 0, 0));
            if thing_classes.contains(&k) {
                let mut pred_sets = BTreeMap::new();
                for (&id, &class) in &pred_classes {
                    if map_pred(class) == Some(k) {
                        let set = pixel_set(pred_inst, id, &keep);
                        if !set.is_empty() {
                            pred_sets.insert(id, set);
                        }
                    }
                }
                let mut gt_sets = BTreeMap::new();
                for (&id, &class) in &gt_classes_of {
                    if class == k {
                        let set = pixel_set(gt_inst, id, &keep);
                        if !set.is_empty() {
                            gt_sets.insert(id, set);
                        }
                    }
                }
                let (iou, tp, fp, fn_count) = brute_matches(&pred_sets, &gt_sets);
                entry.0 += iou;
                entry.1 += tp;
                entry.2 += fp;
                entry.3 += fn_count;
            } else {
                let mut pred_set = HashSet::new();
                let mut gt_set = HashSet::new();
                for h in 0..gt_sem.height() {
                    for w in 0..gt_sem.width() {
                        if !keep(h, w) {
                            continue;
                        }
                        if map_pred(pred_sem.label(h, w)) == Some(k) {
                            pred_set.insert((h, w));
                        }
                        if gt_sem.label(h, w) == k {
                            gt_set.insert((h, w));
                        }
                    }
                }
                let iou = iou_of(&pred_set, &gt_set);
                if iou > 0.5 {
                    entry.0 += iou;
                    entry.1 += 1;
                } else {
                    if !gt_set.is_empty() {
                        entry.3 += 1;
                    }
                    if !pred_set.is_empty() {
                        entry.2 += 1;
                    }
                }
            }
        }
    }

    let mut iou_sum = 0.0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_count = 0u64;
    for (iou, t, f, n) in per_class.values() {
        iou_sum += iou;
        tp += t;
        fp += f;
        fn_count += n;
    }
    let denom = tp as f64 + 0.5 * (fp + fn_count) as f64;
    let (miou, hom, com) = brute_unknown_means(&counts);
    let mut report = MetricReport::new();
    report.insert("PQ", (denom > 0.0).then(|| iou_sum / denom));
    report.insert("SQ", (tp > 0).then(|| iou_sum / tp as f64));
    report.insert("RQ", (denom > 0.0).then(|| tp as f64 / denom));
    report.insert("mIoU_ow", miou);
    report.insert("Hom", hom);
    report.insert("Com", com);
    Ok(report)
}
