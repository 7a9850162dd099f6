//! Property tests for the structural invariants that hold for arbitrary
//! inputs rather than hand-picked cases.

use proptest::prelude::*;

use openpan_core::metrics::{completeness, homogeneity, ow_miou, OpenWorldConfusion};
use openpan_core::model::{
    canonicalize_instances, validate_pair, BinaryMask, InstanceMask, SemanticMask,
};
use openpan_core::offset::geman_mcclure;
use openpan_core::postprocess::fuse_unknown;

fn mask_pair(
    max_classes: u32,
    max_ids: u32,
) -> impl Strategy<Value = (SemanticMask, InstanceMask)> {
    (2usize..6, 2usize..6).prop_flat_map(move |(h, w)| {
        (
            proptest::collection::vec(0..max_classes, h * w),
            proptest::collection::vec(0..max_ids, h * w),
        )
            .prop_map(move |(labels, ids)| {
                (
                    SemanticMask::new(h, w, labels).unwrap(),
                    InstanceMask::new(h, w, ids).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn canonicalization_preserves_the_partition((_, inst) in mask_pair(3, 9)) {
        let canonical = canonicalize_instances(&inst);
        // Idempotent.
        prop_assert_eq!(&canonicalize_instances(&canonical), &canonical);
        // Ids form {0, ..., N}.
        let max = canonical.ids().iter().copied().max().unwrap_or(0);
        for id in 1..=max {
            prop_assert!(canonical.ids().contains(&id));
        }
        // Same-id pixel pairs before iff after.
        let n = inst.ids().len();
        for a in 0..n {
            for b in (a + 1)..n {
                let before = inst.ids()[a] == inst.ids()[b];
                let after = canonical.ids()[a] == canonical.ids()[b];
                prop_assert_eq!(before, after);
            }
        }
    }

    #[test]
    fn validation_commutes_with_canonicalization((sem, inst) in mask_pair(3, 5)) {
        let direct = validate_pair(&sem, &inst).is_ok();
        let canonical = validate_pair(&sem, &canonicalize_instances(&inst)).is_ok();
        prop_assert_eq!(direct, canonical);
    }

    #[test]
    fn fusion_is_dominated_by_both_inputs(
        bits_a in proptest::collection::vec(any::<bool>(), 24),
        bits_b in proptest::collection::vec(any::<bool>(), 24),
    ) {
        let a = BinaryMask::new(4, 6, bits_a).unwrap();
        let b = BinaryMask::new(4, 6, bits_b).unwrap();
        let fused = fuse_unknown(&a, &b).unwrap();
        for i in 0..24 {
            prop_assert_eq!(fused.values()[i], a.values()[i] && b.values()[i]);
        }
        prop_assert!(fused.count_true() <= a.count_true().min(b.count_true()));
    }

    #[test]
    fn confusion_metrics_merge_exactly(
        (pred_a, _) in mask_pair(4, 2),
        (gt_a, _) in mask_pair(3, 2),
        (pred_b, _) in mask_pair(4, 2),
        (gt_b, _) in mask_pair(3, 2),
    ) {
        // Evaluating merged accumulators equals evaluating the concatenation.
        let resize = |mask: &SemanticMask| {
            SemanticMask::from_fn(2, 4, |h, w| {
                mask.label(h % mask.height(), w % mask.width())
            })
        };
        let (pred_a, gt_a) = (resize(&pred_a), resize(&gt_a));
        let (pred_b, gt_b) = (resize(&pred_b), resize(&gt_b));

        let mut merged = OpenWorldConfusion::from_masks(&pred_a, &gt_a, 3, None).unwrap();
        merged.merge(&OpenWorldConfusion::from_masks(&pred_b, &gt_b, 3, None).unwrap()).unwrap();

        let concat_pred = SemanticMask::from_fn(4, 4, |h, w| {
            if h < 2 { pred_a.label(h, w) } else { pred_b.label(h - 2, w) }
        });
        let concat_gt = SemanticMask::from_fn(4, 4, |h, w| {
            if h < 2 { gt_a.label(h, w) } else { gt_b.label(h - 2, w) }
        });
        let concat = OpenWorldConfusion::from_masks(&concat_pred, &concat_gt, 3, None).unwrap();

        prop_assert_eq!(ow_miou(&merged), ow_miou(&concat));
        prop_assert_eq!(homogeneity(&merged), homogeneity(&concat));
        prop_assert_eq!(completeness(&merged), completeness(&concat));
    }

    #[test]
    fn robust_loss_is_even_bounded_and_monotone(x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let rx = geman_mcclure(x);
        prop_assert!((0.0..2.0).contains(&rx));
        prop_assert_eq!(rx, geman_mcclure(-x));
        if x.abs() < y.abs() {
            prop_assert!(rx <= geman_mcclure(y));
        }
    }
}
