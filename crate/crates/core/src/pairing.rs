//! Mini-batch construction under micro- or macro-level count matching.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationConfig};
use crate::counter::FluorescenceFrame;
use crate::error::{ensure_arg, Error, Result};
use crate::par;
use crate::raster::{GrayImage, MaskImage};
use crate::rng::{item_seed, seeded};
use crate::simulator::{sample_macro_count, simulate_mask, CountDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingMode {
    /// Each real patch is paired with a mask holding its estimated object count.
    Micro,
    /// Mask counts are drawn independently from a global prior.
    Macro,
}

impl MatchingMode {
    pub const ALL: [MatchingMode; 2] = [MatchingMode::Micro, MatchingMode::Macro];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchingMode::Micro => "micro",
            MatchingMode::Macro => "macro",
        }
    }
}

impl fmt::Display for MatchingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(MatchingMode::Micro),
            "macro" => Ok(MatchingMode::Macro),
            _ => Err(Error::invalid(format!(
                "matching mode must be micro or macro, got {s:?}"
            ))),
        }
    }
}

/// Real patches paired item-by-item with simulated masks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedBatch {
    pub reals: Vec<GrayImage>,
    /// Augmented masks fed to the synthesis model.
    pub masks: Vec<GrayImage>,
    /// The clean binary masks the augmented ones were made from.
    pub clean: Vec<MaskImage>,
    pub counts: Vec<usize>,
    /// Seed each mask was simulated and augmented from.
    pub seeds: Vec<u64>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.reals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reals.is_empty()
    }
}

/// Builds one batch. Masks have the same size as the real patches and are
/// generated from per-item seeds derived from `rng`, so they depend only on
/// the counts and the random stream, never on real pixel content.
pub fn build_batch<R: Rng + ?Sized>(
    reals: &[GrayImage],
    mode: MatchingMode,
    count_estimates: Option<&[usize]>,
    dist: &CountDistribution,
    aug: &AugmentationConfig,
    rng: &mut R,
) -> Result<PairedBatch> {
    aug.validate()?;
    let counts: Vec<usize> = match mode {
        MatchingMode::Micro => {
            let est =
                count_estimates.ok_or_else(|| Error::invalid("micro matching needs per-patch count estimates"))?;
            ensure_arg!(
                est.len() == reals.len(),
                "{} count estimates for {} real patches",
                est.len(),
                reals.len()
            );
            est.to_vec()
        }
        MatchingMode::Macro => (0..reals.len()).map(|_| sample_macro_count(dist, rng)).collect(),
    };
    let base: u64 = rng.random();
    let pairs = par::map_indexed(reals.len(), |i| -> Result<(MaskImage, GrayImage)> {
        let mut item_rng = seeded(item_seed(base, i));
        let clean = simulate_mask(counts[i], reals[i].dims(), &mut item_rng)?;
        let augmented = augment::apply(&clean, aug, &mut item_rng)?;
        Ok((clean, augmented))
    });
    let mut batch = PairedBatch {
        reals: reals.to_vec(),
        counts,
        seeds: (0..reals.len()).map(|i| item_seed(base, i)).collect(),
        ..Default::default()
    };
    for p in pairs {
        let (clean, augmented) = p?;
        batch.clean.push(clean);
        batch.masks.push(augmented);
    }
    Ok(batch)
}

/// Anything patches can be cropped from.
pub trait Patchable: Sized {
    fn dims(&self) -> (usize, usize);
    fn crop_patch(&self, x0: usize, y0: usize, size: usize) -> Result<Self>;
}

impl Patchable for GrayImage {
    fn dims(&self) -> (usize, usize) {
        GrayImage::dims(self)
    }

    fn crop_patch(&self, x0: usize, y0: usize, size: usize) -> Result<Self> {
        self.crop(x0, y0, size, size)
    }
}

impl Patchable for FluorescenceFrame {
    fn dims(&self) -> (usize, usize) {
        FluorescenceFrame::dims(self)
    }

    fn crop_patch(&self, x0: usize, y0: usize, size: usize) -> Result<Self> {
        self.crop(x0, y0, size, size)
    }
}

/// `n` square patches, each from a uniformly chosen source image at a
/// uniformly chosen position. Sampling is with replacement.
pub fn extract_real_patches<T: Patchable, R: Rng + ?Sized>(
    images: &[T],
    n: usize,
    patch: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    ensure_arg!(patch > 0, "patch size must be positive");
    for (i, img) in images.iter().enumerate() {
        let (w, h) = img.dims();
        ensure_arg!(
            w >= patch && h >= patch,
            "source image {i} is {w}x{h}, smaller than the {patch}px patch"
        );
    }
    ensure_arg!(n == 0 || !images.is_empty(), "no source images to sample from");
    (0..n)
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            let (w, h) = img.dims();
            let x0 = rng.random_range(0..=w - patch);
            let y0 = rng.random_range(0..=h - patch);
            img.crop_patch(x0, y0, patch)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Design;

    fn reals(n: usize, size: usize, v: u8) -> Vec<GrayImage> {
        (0..n).map(|_| GrayImage::filled(size, size, v)).collect()
    }

    #[test]
    fn micro_requires_matching_estimates() {
        let r = reals(3, 64, 0);
        let d = CountDistribution::default();
        let aug = AugmentationConfig::default();
        assert!(build_batch(&r, MatchingMode::Micro, None, &d, &aug, &mut seeded(0)).is_err());
        assert!(build_batch(&r, MatchingMode::Micro, Some(&[1, 2]), &d, &aug, &mut seeded(0)).is_err());
        let b = build_batch(&r, MatchingMode::Micro, Some(&[21, 0, 5]), &d, &aug, &mut seeded(0)).unwrap();
        let sticks: Vec<_> = b.clean.iter().map(|m| m.stick_count().unwrap()).collect();
        assert_eq!(sticks, vec![21, 0, 5]);
        assert_eq!(b.counts, vec![21, 0, 5]);
    }

    #[test]
    fn empty_batch() {
        let b = build_batch(
            &[],
            MatchingMode::Macro,
            None,
            &CountDistribution::default(),
            &AugmentationConfig::default(),
            &mut seeded(1),
        )
        .unwrap();
        assert!(b.is_empty() && b.masks.is_empty() && b.counts.is_empty());
    }

    #[test]
    fn masks_ignore_real_pixels() {
        let aug = AugmentationConfig::for_design(Design::SmoothNoiseBrightness);
        let d = CountDistribution::default();
        let a = build_batch(
            &reals(4, 64, 0),
            MatchingMode::Micro,
            Some(&[3, 9, 1, 30]),
            &d,
            &aug,
            &mut seeded(8),
        )
        .unwrap();
        let b = build_batch(
            &reals(4, 64, 200),
            MatchingMode::Micro,
            Some(&[3, 9, 1, 30]),
            &d,
            &aug,
            &mut seeded(8),
        )
        .unwrap();
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.clean, b.clean);
        let c = build_batch(&reals(4, 64, 0), MatchingMode::Macro, None, &d, &aug, &mut seeded(8)).unwrap();
        let e = build_batch(&reals(4, 64, 90), MatchingMode::Macro, None, &d, &aug, &mut seeded(8)).unwrap();
        assert_eq!(c.masks, e.masks);
        assert!(c.counts.iter().all(|&n| d.contains(n)));
    }

    #[test]
    fn patches() {
        let src = vec![GrayImage::from_fn(200, 150, |x, y| ((x + y) % 256) as u8)];
        let p = extract_real_patches(&src, 500, 128, &mut seeded(3)).unwrap();
        assert_eq!(p.len(), 500);
        assert!(p.iter().all(|q| q.dims() == (128, 128)));
        let again = extract_real_patches(&src, 500, 128, &mut seeded(3)).unwrap();
        assert_eq!(p, again);

        let exact = vec![GrayImage::from_fn(128, 128, |x, _| x as u8)];
        assert_eq!(
            extract_real_patches(&exact, 1, 128, &mut seeded(0)).unwrap()[0],
            exact[0]
        );
        assert!(extract_real_patches(&exact, 1, 129, &mut seeded(0)).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("micro".parse::<MatchingMode>().unwrap(), MatchingMode::Micro);
        assert!("meso".parse::<MatchingMode>().is_err());
    }
}
