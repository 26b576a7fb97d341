mod common;

use proptest::prelude::*;

use villi_core::evaluator::{dice_score, dilate_to_width, evaluate, CenterlineAnnotation, ALL_WIDTHS};
use villi_core::raster::MaskImage;

use common::{distance_oracle, random_mask, set_counting_dice, thin_annotation};

proptest! {
    #[test]
    fn dice_is_symmetric_and_matches_set_counting(seed: u64, da in 0.0f64..0.5, db in 0.0f64..0.5) {
        let a = random_mask(seed, da, 33, 21);
        let b = random_mask(seed.wrapping_add(1), db, 33, 21);
        let d = dice_score(&a, &b).unwrap();
        prop_assert_eq!(d, dice_score(&b, &a).unwrap());
        prop_assert!((d - set_counting_dice(&a, &b)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn dilation_matches_distance_oracle(seed: u64, n in 1usize..6, w in 1u32..=5) {
        let ann = thin_annotation(seed, n);
        let got = dilate_to_width(&CenterlineAnnotation::new(ann.clone(), 0), w).unwrap();
        let want = distance_oracle(&ann, w);
        prop_assert_eq!(got.pixels(), want.pixels());
    }

    #[test]
    fn dilated_masks_grow_with_width(seed: u64, n in 1usize..6) {
        let ann = CenterlineAnnotation::new(thin_annotation(seed, n), 0);
        let masks: Vec<MaskImage> = ALL_WIDTHS.iter().map(|&w| dilate_to_width(&ann, w).unwrap()).collect();
        for pair in masks.windows(2) {
            for (&a, &b) in pair[0].pixels().iter().zip(pair[1].pixels()) {
                prop_assert!(a == 0 || b != 0);
            }
        }
    }
}

#[test]
fn shifted_block_has_dice_one_half() {
    let p = MaskImage::from_fn(6, 6, |x, y| (1..3).contains(&x) && (1..3).contains(&y));
    let g = MaskImage::from_fn(6, 6, |x, y| (2..4).contains(&x) && (1..3).contains(&y));
    assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
    assert!(dice_score(&p, &MaskImage::new(5, 6)).is_err());
}

#[test]
fn empty_predictions_score_zero_at_every_width() {
    let anns: Vec<_> = (0..3)
        .map(|i| CenterlineAnnotation::new(thin_annotation(i, 4), i as usize))
        .collect();
    let preds = vec![MaskImage::new(64, 64); 3];
    let s = evaluate(&preds, &anns, &ALL_WIDTHS).unwrap();
    assert!(s.means.iter().all(|&m| m == 0.0));
    assert!(evaluate(&preds[..2], &anns, &ALL_WIDTHS).is_err());
}
