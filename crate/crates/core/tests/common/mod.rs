#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;

use villi_core::augment::{AugmentationConfig, Design};
use villi_core::counter::FluorescenceFrame;
use villi_core::pairing::{build_batch, extract_real_patches, MatchingMode, PairedBatch};
use villi_core::phantom::{self, centerline, PhantomConfig};
use villi_core::raster::{GrayImage, MaskImage};
use villi_core::rng::seeded;
use villi_core::simulator::{sample_stick, CountDistribution, Stick};

pub fn phantom_frames(n: usize, seed: u64) -> Vec<FluorescenceFrame> {
    let cfg = PhantomConfig::default();
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| phantom::generate(&cfg, &mut rng).unwrap().frame)
        .collect()
}

/// Grayscale real patches cut from phantom frames.
pub fn real_patches(n: usize, patch: usize, seed: u64) -> Vec<GrayImage> {
    let intensity: Vec<GrayImage> = phantom_frames(2, seed).iter().map(|f| f.intensity()).collect();
    extract_real_patches(&intensity, n, patch, &mut seeded(seed ^ 0x5eed)).unwrap()
}

/// `n` macro-matched single-item batches.
pub fn toy_pairs(n: usize, patch: usize, design: Design, seed: u64) -> Vec<PairedBatch> {
    let reals = real_patches(n, patch, seed);
    let aug = AugmentationConfig::for_design(design);
    let mut rng = seeded(seed.wrapping_add(1));
    reals
        .chunks(1)
        .map(|r| {
            build_batch(
                r,
                MatchingMode::Macro,
                None,
                &CountDistribution::default(),
                &aug,
                &mut rng,
            )
            .unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------- oracles

/// Point-in-rectangle test in the frame of one corner: `p = a + t·along + s·across`
/// with `t, s ∈ [0, 1)`.
pub fn inside_by_corner_frame(s: &Stick, px: f64, py: f64) -> bool {
    let th = s.angle_deg.to_radians();
    let along = (th.cos() * s.length as f64, th.sin() * s.length as f64);
    let across = (-th.sin() * s.width as f64, th.cos() * s.width as f64);
    let a = (
        s.center_x - along.0 / 2.0 - across.0 / 2.0,
        s.center_y - along.1 / 2.0 - across.1 / 2.0,
    );
    let d = (px - a.0, py - a.1);
    let t = (d.0 * along.0 + d.1 * along.1) / (s.length as f64).powi(2);
    let u = (d.0 * across.0 + d.1 * across.1) / (s.width as f64).powi(2);
    (0.0..1.0).contains(&t) && (0.0..1.0).contains(&u)
}

pub fn oracle_mask(sticks: &[Stick], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = sticks
                .iter()
                .any(|s| inside_by_corner_frame(s, x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    out
}

/// Areas of the 8-connected foreground components, by breadth-first fill.
pub fn flood_fill_areas(mask: &MaskImage) -> Vec<usize> {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut areas = Vec::new();
    for start in 0..w * h {
        if seen[start] || mask.pixels()[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && mask.pixels()[j] != 0 {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    areas
}

/// Foreground iff some centerline pixel lies within Euclidean distance
/// `(w - 1) / 2`, checked against every annotated pixel.
pub fn distance_oracle(ann: &MaskImage, w: u32) -> MaskImage {
    let (width, height) = ann.dims();
    let on: Vec<(f64, f64)> = (0..width * height)
        .filter(|&i| ann.pixels()[i] != 0)
        .map(|i| ((i % width) as f64, (i / width) as f64))
        .collect();
    let r = (w as f64 - 1.0) / 2.0;
    MaskImage::from_fn(width, height, |x, y| {
        on.iter()
            .any(|&(cx, cy)| ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() <= r + 1e-12)
    })
}

pub fn set_counting_dice(a: &MaskImage, b: &MaskImage) -> f64 {
    let pa: Vec<usize> = (0..a.pixels().len()).filter(|&i| a.pixels()[i] != 0).collect();
    let pb: Vec<usize> = (0..b.pixels().len()).filter(|&i| b.pixels()[i] != 0).collect();
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    let inter = pa.iter().filter(|i| pb.binary_search(i).is_ok()).count();
    2.0 * inter as f64 / (pa.len() + pb.len()) as f64
}

pub fn random_mask(seed: u64, density: f64, w: usize, h: usize) -> MaskImage {
    let mut rng = seeded(seed);
    MaskImage::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// Centerlines of `n` random sticks on a 64×64 canvas.
pub fn thin_annotation(seed: u64, n: usize) -> MaskImage {
    let mut rng = seeded(seed);
    let sticks: Vec<_> = (0..n).map(|_| sample_stick(&mut rng, (64, 64)).unwrap()).collect();
    centerline(&sticks, (64, 64))
}
