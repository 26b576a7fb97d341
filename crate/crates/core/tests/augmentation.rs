use proptest::prelude::*;

use villi_core::augment::{
    add_noise, apply, assign_brightness, gaussian_kernel, gaussian_smooth, AugmentationConfig, Design,
};
use villi_core::raster::GrayImage;
use villi_core::rng::seeded;
use villi_core::simulator::simulate_mask;

fn design() -> impl Strategy<Value = Design> {
    prop::sample::select(Design::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brightness_keeps_the_support(n in 0usize..40, seed: u64) {
        let mask = simulate_mask(n, (64, 64), &mut seeded(seed)).unwrap();
        let img = assign_brightness(&mask, &mut seeded(seed ^ 1)).unwrap();
        for (&m, &v) in mask.pixels().iter().zip(img.pixels()) {
            if m != 0 {
                prop_assert!(v >= 200);
            } else {
                prop_assert_eq!(v, 0);
            }
        }
    }

    #[test]
    fn every_stage_is_deterministic(d in design(), n in 0usize..30, seed: u64) {
        let mask = simulate_mask(n, (64, 64), &mut seeded(seed)).unwrap();
        let cfg = AugmentationConfig::for_design(d);
        let a = apply(&mask, &cfg, &mut seeded(seed)).unwrap();
        let b = apply(&mask, &cfg, &mut seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kernels_sum_to_one(half in 1usize..6, sigma in 0.2f64..5.0) {
        let k = gaussian_kernel(2 * half + 1, sigma).unwrap();
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smoothing_then_noise_is_the_manual_composition(n in 0usize..30, seed: u64) {
        let mask = simulate_mask(n, (64, 64), &mut seeded(seed)).unwrap();
        let cfg = AugmentationConfig::for_design(Design::SmoothNoise);
        let got = apply(&mask, &cfg, &mut seeded(7)).unwrap();
        let manual = add_noise(
            &gaussian_smooth(&mask.to_gray(), cfg.smooth_kernel, cfg.smooth_sigma).unwrap(),
            cfg.noise_sigma,
            &mut seeded(7),
        ).unwrap();
        prop_assert_eq!(got, manual);
    }
}

/// Every design on 1,000 random masks; `u8` already bounds the range, so
/// the check is that the pipeline never fails and that binary output stays
/// binary.
#[test]
fn all_designs_run_on_a_thousand_masks() {
    let mut rng = seeded(11);
    for i in 0..1000 {
        let mask = simulate_mask(i % 64, (64, 64), &mut rng).unwrap();
        for d in Design::ALL {
            let img = apply(&mask, &AugmentationConfig::for_design(d), &mut rng).unwrap();
            assert_eq!(img.dims(), (64, 64));
            if d == Design::Binary {
                assert!(img.pixels().iter().all(|&v| v == 0 || v == 255));
            }
        }
    }
}

#[test]
fn smoothing_an_impulse_stamps_the_kernel() {
    let mut img = GrayImage::new(15, 15);
    img.set(7, 7, 255);
    let out = gaussian_smooth(&img, 5, 1.0).unwrap();
    // the kernel evaluated directly, without normalizing through the library
    let raw: Vec<f64> = (0..25)
        .map(|i| {
            let (dx, dy) = ((i % 5) as f64 - 2.0, (i / 5) as f64 - 2.0);
            (-(dx * dx + dy * dy) / 2.0).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    for y in 0..15 {
        for x in 0..15 {
            let (dx, dy) = (x as i64 - 7, y as i64 - 7);
            let want = if dx.abs() <= 2 && dy.abs() <= 2 {
                (255.0 * raw[((dy + 2) * 5 + dx + 2) as usize] / total).round() as u8
            } else {
                0
            };
            assert_eq!(out.get(x, y), want, "({x}, {y})");
        }
    }
}

#[test]
fn noise_mean_is_near_zero() {
    let img = GrayImage::filled(128, 128, 128);
    let out = add_noise(&img, 25.0, &mut seeded(3)).unwrap();
    let mean: f64 = out.pixels().iter().map(|&v| v as f64 - 128.0).sum::<f64>() / (128.0 * 128.0);
    assert!(mean.abs() < 3.0 * 25.0 / 128.0, "mean {mean}");
    assert!(add_noise(&img, -1.0, &mut seeded(3)).is_err());
    assert!(gaussian_smooth(&img, 4, 1.0).is_err());
}
