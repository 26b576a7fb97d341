//! Hot kernels on one worker thread versus the default pool.
//!
//! `cargo bench -p villi-core` compares both pools; with
//! `--no-default-features` only the sequential code path is measured.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use villi_core::augment::{self, AugmentationConfig, Design};
use villi_core::counter::label_components;
use villi_core::nn::kernels::{conv2d_backward, conv2d_forward};
use villi_core::nn::{ConvSpec, PadMode, Tensor};
use villi_core::par;
use villi_core::raster::GrayImage;
use villi_core::rng::{item_seed, seeded};
use villi_core::segmentation::{self, SegmentationConfig, SegmentationModel, UNetArch};
use villi_core::simulator::simulate_mask;
use villi_core::stitcher::{predict_frame, Frame};

fn ramp(shape: [usize; 4], phase: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * 0.37 + phase).sin()).collect()).unwrap()
}

/// `(label, threads)` pairs to compare. Zero means the default pool.
fn pools() -> Vec<(&'static str, usize)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", 1), ("parallel", 0)]
    } else {
        vec![("sequential", 1)]
    }
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_pool<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn conv(c: &mut Criterion) {
    let x = ramp([4, 16, 64, 64], 0.1);
    let w = ramp([32, 16, 3, 3], 0.7);
    let spec = ConvSpec::same(3, PadMode::Zero);
    let dy = ramp([4, 32, 64, 64], 1.3);
    let mut g = c.benchmark_group("conv3x3_16to32_64px_batch4");
    for (label, threads) in pools() {
        g.bench_function(BenchmarkId::new("forward", label), |b| {
            with_pool(threads, || b.iter(|| conv2d_forward(black_box(&x), &w, None, spec)))
        });
        g.bench_function(BenchmarkId::new("backward", label), |b| {
            with_pool(threads, || {
                b.iter(|| conv2d_backward(black_box(&x), &w, &dy, spec, true))
            })
        });
    }
    g.finish();
}

fn masks(c: &mut Criterion) {
    let aug = AugmentationConfig::for_design(Design::SmoothNoiseBrightness);
    let mut g = c.benchmark_group("simulate_and_augment_64_masks");
    for (label, threads) in pools() {
        g.bench_function(label, |b| {
            with_pool(threads, || {
                b.iter(|| {
                    par::map_indexed(64, |i| {
                        let mut rng = seeded(item_seed(7, i));
                        let m = simulate_mask(11 + i % 53, (128, 128), &mut rng).unwrap();
                        let img = augment::apply(&m, &aug, &mut rng).unwrap();
                        label_components(&m.without_sticks()).1.len() + img.pixels().len()
                    })
                })
            })
        });
    }
    g.finish();
}

fn networks(c: &mut Criterion) {
    let mut rng = seeded(3);
    let masks: Vec<_> = (0..4)
        .map(|i| simulate_mask(8 + i, (64, 64), &mut rng).unwrap())
        .collect();
    let fakes: Vec<GrayImage> = masks.iter().map(|m| m.to_gray()).collect();
    let cfg = SegmentationConfig {
        epochs: 1,
        input_size: 64,
        depth: 3,
        base_channels: 8,
        batch_size: 4,
        ..Default::default()
    };
    let model = SegmentationModel::new(
        UNetArch {
            depth: 3,
            base_channels: 8,
            input_size: 64,
        },
        1,
    );
    let frame = Frame::new(GrayImage::from_fn(256, 256, |x, y| ((x * 7) ^ (y * 3)) as u8), 0).unwrap();
    let mut g = c.benchmark_group("unet");
    g.sample_size(10);
    for (label, threads) in pools() {
        g.bench_function(BenchmarkId::new("train_step", label), |b| {
            with_pool(threads, || {
                b.iter(|| segmentation::train(&fakes, &masks, &cfg, |_, _| Ok(())).unwrap())
            })
        });
        g.bench_function(BenchmarkId::new("predict_frame", label), |b| {
            with_pool(threads, || b.iter(|| predict_frame(&model, black_box(&frame)).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, masks, networks);
criterion_main!(benches);
