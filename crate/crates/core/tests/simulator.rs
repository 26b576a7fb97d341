mod common;

use proptest::prelude::*;

use villi_core::rng::seeded;
use villi_core::simulator::{rasterize, sample_macro_count, sample_stick, simulate_mask, CountDistribution, Stick};

use common::oracle_mask;

proptest! {
    #[test]
    fn sampled_sticks_respect_ranges(seed: u64, w in 46usize..300, h in 46usize..300) {
        let s = sample_stick(&mut seeded(seed), (w, h)).unwrap();
        prop_assert!((2..=4).contains(&s.width));
        prop_assert!((9..=45).contains(&s.length));
        prop_assert!((0.0..180.0).contains(&s.angle_deg));
        prop_assert!(s.center_x >= 0.0 && s.center_x < w as f64);
        prop_assert!(s.center_y >= 0.0 && s.center_y < h as f64);
        prop_assert_eq!(s.brightness, 255);
    }

    #[test]
    fn mask_holds_exactly_the_requested_sticks(n in 0usize..=200, seed: u64) {
        let m = simulate_mask(n, (128, 128), &mut seeded(seed)).unwrap();
        prop_assert_eq!(m.sticks().unwrap().len(), n);
        prop_assert_eq!(m.stick_count(), Some(n));
    }

    #[test]
    fn identical_seeds_give_identical_masks(n in 0usize..60, seed: u64) {
        let a = simulate_mask(n, (128, 128), &mut seeded(seed)).unwrap();
        let b = simulate_mask(n, (128, 128), &mut seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rasterizing_a_union_ors_the_parts(seed: u64, na in 0usize..8, nb in 0usize..8) {
        let mut rng = seeded(seed);
        let a: Vec<Stick> = (0..na).map(|_| sample_stick(&mut rng, (96, 96)).unwrap()).collect();
        let b: Vec<Stick> = (0..nb).map(|_| sample_stick(&mut rng, (96, 96)).unwrap()).collect();
        let both: Vec<Stick> = a.iter().chain(&b).copied().collect();
        let (ma, mb, mab) = (rasterize(&a, (96, 96)), rasterize(&b, (96, 96)), rasterize(&both, (96, 96)));
        for i in 0..96 * 96 {
            prop_assert_eq!(mab.pixels()[i] != 0, ma.pixels()[i] != 0 || mb.pixels()[i] != 0);
        }
    }

    #[test]
    fn rasterization_matches_corner_frame_oracle(seed: u64) {
        let mut rng = seeded(seed);
        let sticks: Vec<Stick> = (0..3).map(|_| sample_stick(&mut rng, (128, 100)).unwrap()).collect();
        let m = rasterize(&sticks, (128, 100));
        let oracle = oracle_mask(&sticks, 128, 100);
        for (i, &o) in oracle.iter().enumerate() {
            prop_assert_eq!(m.pixels()[i] != 0, o, "pixel {}", i);
        }
    }

    #[test]
    fn macro_counts_stay_in_range(low in 0u32..100, span in 0u32..60, seed: u64) {
        let dist = CountDistribution::new(low, low + span).unwrap();
        let mut rng = seeded(seed);
        for _ in 0..100 {
            let n = sample_macro_count(&dist, &mut rng);
            prop_assert!(dist.contains(n));
        }
    }
}

#[test]
fn axis_aligned_stick_of_width_two_and_length_nine_covers_eighteen_pixels() {
    let s = Stick {
        center_x: 40.3,
        center_y: 51.7,
        angle_deg: 0.0,
        width: 2,
        length: 9,
        brightness: 255,
    };
    assert_eq!(rasterize(&[s], (128, 128)).foreground_count(), 18);
}

#[test]
fn macro_count_frequencies_are_uniform_within_four_sigma() {
    let dist = CountDistribution::default();
    let n = 100_000usize;
    let mut hist = vec![0usize; 64];
    let mut rng = seeded(2024);
    for _ in 0..n {
        hist[sample_macro_count(&dist, &mut rng)] += 1;
    }
    let p = 1.0 / 53.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (v, &c) in hist.iter().enumerate() {
        if (11..=63).contains(&v) {
            assert!((c as f64 - n as f64 * p).abs() <= 4.0 * sigma, "value {v}: {c}");
        } else {
            assert_eq!(c, 0);
        }
    }
}

#[test]
fn degenerate_and_empty_ranges() {
    let d = CountDistribution::new(11, 11).unwrap();
    let mut rng = seeded(5);
    assert!((0..50).all(|_| sample_macro_count(&d, &mut rng) == 11));
    assert!(CountDistribution::new(12, 11).is_err());
    assert!(sample_stick(&mut rng, (45, 128)).is_err());
    assert_eq!(simulate_mask(0, (128, 128), &mut rng).unwrap().foreground_count(), 0);
}
