//! Randomized property tests over the pure helpers.

use proptest::prelude::*;

use screen_core::corpus::{resize_mask_nearest, LungMask};
use screen_core::distill::cosine_schedule;
use screen_core::evalx::{iou, pool_mask_to_patches, threshold_map, AttentionMap};
use screen_core::grid::{BitGrid, Grid};

fn bitgrid(h: usize, w: usize) -> impl Strategy<Value = BitGrid> {
    proptest::collection::vec(any::<bool>(), h * w)
        .prop_map(move |cells| BitGrid::from_fn(h, w, |r, c| cells[r * w + c]))
}

fn attention_map(side: usize) -> impl Strategy<Value = AttentionMap> {
    proptest::collection::vec(0.0f32..1.0, side * side).prop_map(move |v| {
        let grid = Grid::from_fn(side, side, |r, c| v[r * side + c]);
        let (lo, hi) = grid.min_max();
        let spread = (hi - lo).max(1e-12);
        let normalized = Grid::from_fn(side, side, |r, c| (grid.get(r, c) - lo) / spread);
        AttentionMap { head_index: 0, grid, normalized, constant: false }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Raising the threshold can only shrink the flagged set.
    #[test]
    fn threshold_masks_are_nested(map in attention_map(8), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = threshold_map(&map, lo).unwrap();
        let tight = threshold_map(&map, hi).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                prop_assert!(!tight.get(r, c) || loose.get(r, c));
            }
        }
    }

    /// Integer upscaling followed by the matching downscale is lossless.
    #[test]
    fn nearest_resize_integer_round_trip(bits in bitgrid(5, 7), k in 1usize..5) {
        let src = LungMask::new(bits.clone());
        let up = resize_mask_nearest(&src, (5 * k, 7 * k)).unwrap();
        let back = resize_mask_nearest(&up, (5, 7)).unwrap();
        prop_assert_eq!(back.bits, bits);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in bitgrid(6, 6), b in bitgrid(6, 6)) {
        let ab = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab.to_bits(), iou(&b, &a).to_bits());
        prop_assert_eq!(iou(&a, &a).to_bits(), 1.0f64.to_bits());
    }

    /// A patch is flagged exactly when one of its pixels is set; sides
    /// divide the mask so every pixel has a unique patch.
    #[test]
    fn patch_pooling_matches_pixel_scan(
        mask in bitgrid(12, 12),
        side in proptest::sample::select(vec![1usize, 2, 3, 4, 6, 12]),
    ) {
        let pooled = pool_mask_to_patches(&mask, side);
        for gr in 0..side {
            for gc in 0..side {
                let mut any = false;
                for r in 0..12 {
                    for c in 0..12 {
                        if r * side / 12 == gr && c * side / 12 == gc && mask.get(r, c) {
                            any = true;
                        }
                    }
                }
                prop_assert_eq!(pooled.get(gr, gc), any, "patch ({}, {})", gr, gc);
            }
        }
    }

    /// The cosine schedule stays inside [min(start, end), max(start, end)].
    #[test]
    fn cosine_schedule_is_contained(
        t in 0usize..=50,
        start in -2.0f64..2.0,
        end in -2.0f64..2.0,
    ) {
        let v = cosine_schedule(t, 50, start, end).unwrap();
        prop_assert!(v >= start.min(end) - 1e-12 && v <= start.max(end) + 1e-12);
    }
}
