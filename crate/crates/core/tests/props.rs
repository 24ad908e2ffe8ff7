//! Property tests for the algebraic invariants of the geometry and
//! residual-field layers.

use deltafield_core::edit::{apply_residual, masked_scale_factor, ResidualField};
use deltafield_core::geom::{mask_iou, masked_l1, EditMask, Frame, PointMap};
use proptest::prelude::*;

fn point_map_strategy(n: usize, h: usize, w: usize) -> impl Strategy<Value = PointMap> {
    proptest::collection::vec(-5.0f64..5.0, n * h * w * 3)
        .prop_map(move |v| PointMap::new(n, h, w, Frame::World, v).unwrap())
}

fn mask_strategy(n: usize, h: usize, w: usize) -> impl Strategy<Value = EditMask> {
    proptest::collection::vec(0u8..=1, n * h * w)
        .prop_map(move |v| EditMask::new(n, h, w, v).unwrap())
}

fn masked_l1_bruteforce(a: &PointMap, b: &PointMap, m: &EditMask) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, &bit) in m.values().iter().enumerate() {
        if bit == 1 {
            count += 1;
            for c in 0..3 {
                acc += (a.values()[i * 3 + c] - b.values()[i * 3 + c]).abs();
            }
        }
    }
    (count > 0).then(|| acc / (3.0 * count as f64))
}

proptest! {
    #[test]
    fn masked_l1_symmetric_and_matches_bruteforce(
        a in point_map_strategy(2, 4, 4),
        b in point_map_strategy(2, 4, 4),
        m in mask_strategy(2, 4, 4),
    ) {
        match masked_l1_bruteforce(&a, &b, &m) {
            Some(expected) => {
                let ab = masked_l1(&a, &b, &m).unwrap();
                let ba = masked_l1(&b, &a, &m).unwrap();
                prop_assert!((ab - expected).abs() < 1e-12);
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
                prop_assert_eq!(masked_l1(&a, &a, &m).unwrap(), 0.0);
            }
            None => prop_assert!(masked_l1(&a, &b, &m).is_err()),
        }
    }

    #[test]
    fn mask_iou_in_unit_interval(
        a in proptest::collection::vec(0u8..=1, 32),
        b in proptest::collection::vec(0u8..=1, 32),
    ) {
        let iou = mask_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn residual_application_is_local(
        base in point_map_strategy(1, 4, 4),
        delta_values in proptest::collection::vec(-2.0f64..2.0, 48),
        m in mask_strategy(1, 4, 4),
    ) {
        let delta = ResidualField::new(1, 4, 4, delta_values).unwrap();
        let out = apply_residual(&base, &delta, &m, true).unwrap();
        for (i, &bit) in m.values().iter().enumerate() {
            for c in 0..3 {
                let idx = i * 3 + c;
                if bit == 0 {
                    prop_assert_eq!(out.values()[idx].to_bits(), base.values()[idx].to_bits());
                } else {
                    let expect = base.values()[idx] + delta.values()[idx];
                    prop_assert_eq!(out.values()[idx].to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn scale_factor_minimizes_masked_squared_error(
        pred in point_map_strategy(1, 4, 4),
        gt in point_map_strategy(1, 4, 4),
        m in mask_strategy(1, 4, 4),
    ) {
        prop_assume!(m.count() > 0);
        let sq_err = |s: f64| {
            let mut acc = 0.0;
            for (i, &bit) in m.values().iter().enumerate() {
                if bit == 1 {
                    for c in 0..3 {
                        let d = s * pred.values()[i * 3 + c] - gt.values()[i * 3 + c];
                        acc += d * d;
                    }
                }
            }
            acc
        };
        let s = masked_scale_factor(&pred, &gt, &m, 1e-8).unwrap().s;
        // Degenerate all-zero predictions pin s at 0; skip those.
        prop_assume!(s.abs() > 1e-6);
        let at = sq_err(s);
        prop_assert!(sq_err(s * 1.01) > at);
        prop_assert!(sq_err(s * 0.99) > at);
    }
}
