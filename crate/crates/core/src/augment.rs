//! Mask augmentation: per-stick brightness, Gaussian smoothing, additive noise.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::raster::{clip_u8, GrayImage, MaskImage};

pub const MIN_STICK_INTENSITY: u8 = 200;
pub const MAX_STICK_INTENSITY: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub smooth: bool,
    pub noise: bool,
    pub brightness: bool,
    pub smooth_kernel: usize,
    pub smooth_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            smooth: false,
            noise: false,
            brightness: false,
            smooth_kernel: 5,
            smooth_sigma: 1.0,
            noise_sigma: 25.0,
        }
    }
}

/// The four cumulative augmentation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Binary,
    Smooth,
    SmoothNoise,
    SmoothNoiseBrightness,
}

impl Design {
    pub const ALL: [Design; 4] = [
        Design::Binary,
        Design::Smooth,
        Design::SmoothNoise,
        Design::SmoothNoiseBrightness,
    ];

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Design::Binary => (false, false, false),
            Design::Smooth => (true, false, false),
            Design::SmoothNoise => (true, true, false),
            Design::SmoothNoiseBrightness => (true, true, true),
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Design::Binary => "binary",
            Design::Smooth => "smooth",
            Design::SmoothNoise => "smooth_noise",
            Design::SmoothNoiseBrightness => "smooth_noise_bright",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl AugmentationConfig {
    pub fn for_design(design: Design) -> Self {
        let (smooth, noise, brightness) = design.flags();
        AugmentationConfig {
            smooth,
            noise,
            brightness,
            ..Default::default()
        }
    }

    /// The design these flags describe; errors on non-cumulative combinations.
    pub fn design(&self) -> Result<Design> {
        Design::ALL
            .into_iter()
            .find(|d| d.flags() == (self.smooth, self.noise, self.brightness))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "augmentation flags smooth={} noise={} brightness={} are not cumulative",
                    self.smooth, self.noise, self.brightness
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        self.design()?;
        ensure_arg!(
            self.smooth_kernel >= 3 && self.smooth_kernel % 2 == 1,
            "smoothing kernel must be odd and >= 3, got {}",
            self.smooth_kernel
        );
        ensure_arg!(
            self.smooth_sigma > 0.0 && self.smooth_sigma.is_finite(),
            "smoothing sigma must be positive"
        );
        ensure_arg!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise sigma must be non-negative"
        );
        Ok(())
    }
}

/// Paints every stick with its own intensity drawn uniformly from
/// `[200, 255]`; overlapping sticks keep the brighter value.
pub fn assign_brightness<R: Rng + ?Sized>(mask: &MaskImage, rng: &mut R) -> Result<GrayImage> {
    let sticks = mask
        .sticks()
        .ok_or_else(|| Error::invalid("mask carries no stick list"))?;
    let size = mask.dims();
    let mut out = GrayImage::new(size.0, size.1);
    for stick in sticks {
        let v = rng.random_range(MIN_STICK_INTENSITY..=MAX_STICK_INTENSITY);
        stick.for_each_pixel(size, |x, y| {
            if out.get(x, y) < v {
                out.set(x, y, v);
            }
        });
    }
    Ok(out)
}

/// Normalized `size`×`size` Gaussian weights, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    ensure_arg!(size % 2 == 1, "kernel size must be odd, got {size}");
    ensure_arg!(sigma > 0.0, "sigma must be positive");
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let dx = (i % size) as f64 - r;
            let dy = (i / size) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Mirror index into `0..len` without repeating the edge sample (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

pub fn gaussian_smooth(img: &GrayImage, kernel: usize, sigma: f64) -> Result<GrayImage> {
    let k = gaussian_kernel(kernel, sigma)?;
    let r = (kernel / 2) as isize;
    let (w, h) = img.dims();
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for ky in 0..kernel {
            let sy = reflect_index(y as isize + ky as isize - r, h);
            for kx in 0..kernel {
                let sx = reflect_index(x as isize + kx as isize - r, w);
                acc += k[ky * kernel + kx] * img.get(sx, sy) as f64;
            }
        }
        clip_u8(acc)
    }))
}

/// Independent zero-mean Gaussian noise on every pixel, clipped to `[0, 255]`.
pub fn add_noise<R: Rng + ?Sized>(img: &GrayImage, sigma: f64, rng: &mut R) -> Result<GrayImage> {
    ensure_arg!(
        sigma >= 0.0 && sigma.is_finite(),
        "noise sigma must be >= 0, got {sigma}"
    );
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = clip_u8(*p as f64 + normal.sample(rng));
    }
    Ok(out)
}

/// Runs brightness (or `{0, 255}` rendering), smoothing, then noise, as enabled.
pub fn apply<R: Rng + ?Sized>(mask: &MaskImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<GrayImage> {
    cfg.validate()?;
    let mut img = if cfg.brightness {
        assign_brightness(mask, rng)?
    } else {
        mask.to_gray()
    };
    if cfg.smooth {
        img = gaussian_smooth(&img, cfg.smooth_kernel, cfg.smooth_sigma)?;
    }
    if cfg.noise {
        img = add_noise(&img, cfg.noise_sigma, rng)?;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::simulator::{rasterize, simulate_mask, Stick};

    #[test]
    fn only_cumulative_flags_are_valid() {
        for d in Design::ALL {
            assert_eq!(AugmentationConfig::for_design(d).design().unwrap(), d);
        }
        let bad = AugmentationConfig {
            noise: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            smooth: true,
            brightness: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let even = AugmentationConfig {
            smooth_kernel: 4,
            ..Default::default()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn kernel_is_normalized() {
        for (size, sigma) in [(3, 0.5), (5, 1.0), (7, 2.5)] {
            let k = gaussian_kernel(size, sigma).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gaussian_kernel(4, 1.0).is_err());
    }

    #[test]
    fn smoothing_constant_and_zero() {
        let c = GrayImage::filled(20, 17, 131);
        let s = gaussian_smooth(&c, 5, 1.0).unwrap();
        assert!(s.pixels().iter().all(|&v| v.abs_diff(131) <= 1));
        let z = GrayImage::new(9, 9);
        assert_eq!(gaussian_smooth(&z, 5, 1.0).unwrap(), z);
        assert!(gaussian_smooth(&z, 6, 1.0).is_err());
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let mut img = GrayImage::new(15, 15);
        img.set(7, 7, 255);
        let s = gaussian_smooth(&img, 5, 1.0).unwrap();
        for y in 0..15usize {
            for x in 0..15usize {
                let (dx, dy) = (x as f64 - 7.0, y as f64 - 7.0);
                let expect = if dx.abs() <= 2.0 && dy.abs() <= 2.0 {
                    // direct evaluation of the normalized 5x5 Gaussian
                    let mut total = 0.0;
                    for i in -2..=2 {
                        for j in -2..=2 {
                            total += (-((i * i + j * j) as f64) / 2.0).exp();
                        }
                    }
                    (255.0 * (-(dx * dx + dy * dy) / 2.0).exp() / total).round() as u8
                } else {
                    0
                };
                assert_eq!(s.get(x, y), expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn reflect_excludes_edge() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn noise_identity_range_and_mean() {
        let img = GrayImage::filled(128, 128, 128);
        assert_eq!(add_noise(&img, 0.0, &mut seeded(1)).unwrap(), img);
        assert!(add_noise(&img, -1.0, &mut seeded(1)).is_err());
        let sigma = 25.0;
        let n = add_noise(&img, sigma, &mut seeded(2)).unwrap();
        let mean: f64 = n.pixels().iter().map(|&v| v as f64 - 128.0).sum::<f64>() / (128.0 * 128.0);
        assert!(mean.abs() < 3.0 * sigma / 128.0, "mean {mean}");
    }

    #[test]
    fn brightness_needs_sticks_and_stays_in_range() {
        let plain = MaskImage::new(8, 8);
        assert!(assign_brightness(&plain, &mut seeded(0)).is_err());
        let empty = rasterize(&[], (64, 64));
        assert!(assign_brightness(&empty, &mut seeded(0))
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == 0));
        let m = simulate_mask(25, (128, 128), &mut seeded(3)).unwrap();
        let b = assign_brightness(&m, &mut seeded(4)).unwrap();
        for (&mv, &bv) in m.pixels().iter().zip(b.pixels()) {
            if mv == 1 {
                assert!((200..=255).contains(&bv));
            } else {
                assert_eq!(bv, 0);
            }
        }
    }

    #[test]
    fn single_stick_gets_its_sampled_value() {
        let s = Stick {
            center_x: 30.0,
            center_y: 30.0,
            angle_deg: 33.0,
            width: 3,
            length: 20,
            brightness: 255,
        };
        let m = rasterize(&[s], (64, 64));
        let img = assign_brightness(&m, &mut seeded(17)).unwrap();
        let expect: u8 = seeded(17).random_range(200..=255);
        for (&mv, &v) in m.pixels().iter().zip(img.pixels()) {
            assert_eq!(v, if mv == 1 { expect } else { 0 });
        }
    }

    #[test]
    fn apply_designs() {
        let m = simulate_mask(15, (64, 64), &mut seeded(5)).unwrap();
        let binary = apply(&m, &AugmentationConfig::default(), &mut seeded(0)).unwrap();
        assert_eq!(binary, m.to_gray());

        let zero = rasterize(&[], (64, 64));
        let smooth = AugmentationConfig::for_design(Design::Smooth);
        assert!(apply(&zero, &smooth, &mut seeded(0))
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == 0));

        let cfg = AugmentationConfig::for_design(Design::SmoothNoise);
        let out = apply(&m, &cfg, &mut seeded(9)).unwrap();
        let mut rng = seeded(9);
        let manual = add_noise(
            &gaussian_smooth(&m.to_gray(), 5, 1.0).unwrap(),
            cfg.noise_sigma,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out, manual);
    }
}
