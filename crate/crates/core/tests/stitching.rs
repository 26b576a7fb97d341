use proptest::prelude::*;
use rand::Rng;

use villi_core::raster::{GrayImage, ProbMap};
use villi_core::rng::seeded;
use villi_core::segmentation::{SegmentationModel, UNetArch};
use villi_core::stitcher::{predict_frame, segment_frame, split_quadrants, stitch, Frame, PatchSegmenter};
use villi_core::Result;

fn random_frame(seed: u64) -> Frame {
    let mut rng = seeded(seed);
    Frame::new(GrayImage::from_fn(256, 256, |_, _| rng.random()), 0).unwrap()
}

/// Per-patch model with a 3×3 neighbourhood: only a whole-frame model could
/// leak across quadrant seams.
struct BoxBlur;

impl PatchSegmenter for BoxBlur {
    fn input_size(&self) -> usize {
        128
    }
    fn predict_patch(&self, patch: &GrayImage) -> Result<ProbMap> {
        let (w, h) = patch.dims();
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for sy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for sx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        acc += patch.get(sx, sy) as f32;
                        n += 1.0;
                    }
                }
                v.push(acc / n / 255.0);
            }
        }
        ProbMap::from_raw(w, h, v)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_then_stitch_is_exact(seed: u64, index in 0usize..1000) {
        let f = random_frame(seed);
        let back = stitch(&split_quadrants(&f), index).unwrap();
        prop_assert_eq!(back.pixels(), f.pixels());
        prop_assert_eq!(back.frame_index, index);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn editing_one_quadrant_leaves_the_others_alone(seed: u64, quadrant in 0usize..4) {
        let f = random_frame(seed);
        let mut edited = f.pixels().clone();
        let (qx, qy) = ((quadrant % 2) * 128, (quadrant / 2) * 128);
        let mut rng = seeded(seed ^ 0xabc);
        for _ in 0..500 {
            let (x, y) = (qx + rng.random_range(0..128), qy + rng.random_range(0..128));
            edited.set(x, y, rng.random());
        }
        let g = Frame::new(edited, 0).unwrap();
        let (pa, pb) = (predict_frame(&BoxBlur, &f).unwrap(), predict_frame(&BoxBlur, &g).unwrap());
        for y in 0..256 {
            for x in 0..256 {
                if (x / 128) + 2 * (y / 128) != quadrant {
                    prop_assert_eq!(pa.get(x, y), pb.get(x, y));
                }
            }
        }
    }
}

#[test]
fn network_predictions_respect_quadrants() {
    let model = SegmentationModel::new(
        UNetArch {
            depth: 2,
            base_channels: 4,
            input_size: 64,
        },
        3,
    );
    let f = random_frame(1);
    let mut edited = f.pixels().clone();
    for y in 130..250 {
        for x in 5..120 {
            edited.set(x, y, 255 - edited.get(x, y));
        }
    }
    let g = Frame::new(edited, 0).unwrap();
    let (a, b) = (
        segment_frame(&model, &f, 0.5).unwrap(),
        segment_frame(&model, &g, 0.5).unwrap(),
    );
    assert_eq!(a.dims(), (256, 256));
    assert!(a.pixels().iter().all(|&v| v <= 1));
    for y in 0..256 {
        for x in 0..256 {
            if !(x < 128 && y >= 128) {
                assert_eq!(a.get(x, y), b.get(x, y), "({x}, {y})");
            }
        }
    }
}
