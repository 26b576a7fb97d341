//! Procedural stick masks (the clean annotation domain).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::raster::MaskImage;

pub const MIN_WIDTH: u32 = 2;
pub const MAX_WIDTH: u32 = 4;
pub const MIN_LENGTH: u32 = 9;
pub const MAX_LENGTH: u32 = 45;
/// Smallest image side accepted by [`sample_stick`].
pub const MIN_IMAGE_SIDE: usize = MAX_LENGTH as usize + 1;
pub const DEFAULT_BRIGHTNESS: u8 = 255;

/// One simulated microvillus: a rotated rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stick {
    #[serde(rename = "cx")]
    pub center_x: f64,
    #[serde(rename = "cy")]
    pub center_y: f64,
    /// Orientation of the long axis in degrees, `[0, 180)`.
    pub angle_deg: f64,
    pub width: u32,
    pub length: u32,
    pub brightness: u8,
}

impl Stick {
    pub fn is_valid_for(&self, image_size: (usize, usize)) -> bool {
        (MIN_WIDTH..=MAX_WIDTH).contains(&self.width)
            && (MIN_LENGTH..=MAX_LENGTH).contains(&self.length)
            && self.center_x >= 0.0
            && self.center_x < image_size.0 as f64
            && self.center_y >= 0.0
            && self.center_y < image_size.1 as f64
            && (0.0..180.0).contains(&self.angle_deg)
    }

    /// Whether the point `(px, py)` lies in the stick's rectangle.
    ///
    /// Both axes use half-open extents `[-half, half)`, so an axis-aligned
    /// stick covers exactly `width * length` pixel centers wherever it sits.
    #[inline]
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let dx = px - self.center_x;
        let dy = py - self.center_y;
        let along = dx * cos + dy * sin;
        let across = -dx * sin + dy * cos;
        let hl = self.length as f64 / 2.0;
        let hw = self.width as f64 / 2.0;
        (-hl..hl).contains(&along) && (-hw..hw).contains(&across)
    }

    /// Pixel bounding box `(x0, y0, x1, y1)`, inclusive, clipped to the image.
    /// `None` when the stick misses the image entirely.
    pub fn pixel_bounds(&self, image_size: (usize, usize)) -> Option<(usize, usize, usize, usize)> {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let hl = self.length as f64 / 2.0;
        let hw = self.width as f64 / 2.0;
        let ex = hl * cos.abs() + hw * sin.abs();
        let ey = hl * sin.abs() + hw * cos.abs();
        // pixel centers sit at integer + 0.5
        let x0 = (self.center_x - ex - 1.0).floor().max(0.0);
        let y0 = (self.center_y - ey - 1.0).floor().max(0.0);
        let x1 = (self.center_x + ex + 1.0).ceil().min(image_size.0 as f64 - 1.0);
        let y1 = (self.center_y + ey + 1.0).ceil().min(image_size.1 as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    /// Calls `f(x, y)` for every in-image pixel covered by the stick.
    pub fn for_each_pixel(&self, image_size: (usize, usize), mut f: impl FnMut(usize, usize)) {
        let Some((x0, y0, x1, y1)) = self.pixel_bounds(image_size) else {
            return;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    f(x, y);
                }
            }
        }
    }

    /// Like [`Stick::for_each_pixel`] but without clipping to an image.
    pub fn for_each_pixel_unclipped(&self, mut f: impl FnMut(i64, i64)) {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let hl = self.length as f64 / 2.0;
        let hw = self.width as f64 / 2.0;
        let ex = hl * cos.abs() + hw * sin.abs() + 1.0;
        let ey = hl * sin.abs() + hw * cos.abs() + 1.0;
        let (x0, x1) = ((self.center_x - ex).floor() as i64, (self.center_x + ex).ceil() as i64);
        let (y0, y1) = ((self.center_y - ey).floor() as i64, (self.center_y + ey).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    f(x, y);
                }
            }
        }
    }

    /// End points of the long axis.
    pub fn endpoints(&self) -> ((f64, f64), (f64, f64)) {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let hl = self.length as f64 / 2.0;
        (
            (self.center_x - hl * cos, self.center_y - hl * sin),
            (self.center_x + hl * cos, self.center_y + hl * sin),
        )
    }
}

/// Inclusive uniform range of per-mask stick counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub low: u32,
    pub high: u32,
}

impl Default for CountDistribution {
    fn default() -> Self {
        CountDistribution { low: 11, high: 63 }
    }
}

impl CountDistribution {
    pub fn new(low: u32, high: u32) -> Result<Self> {
        ensure_arg!(low <= high, "count range {low}..={high} is empty");
        Ok(CountDistribution { low, high })
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.low as usize..=self.high as usize).contains(&n)
    }

    /// Number of distinct values in the range.
    pub fn support(&self) -> usize {
        (self.high - self.low) as usize + 1
    }
}

pub fn sample_stick<R: Rng + ?Sized>(rng: &mut R, image_size: (usize, usize)) -> Result<Stick> {
    ensure_arg!(
        image_size.0 >= MIN_IMAGE_SIDE && image_size.1 >= MIN_IMAGE_SIDE,
        "image size {}x{} is below the {MIN_IMAGE_SIDE}-pixel minimum",
        image_size.0,
        image_size.1
    );
    let width = rng.random_range(MIN_WIDTH..=MAX_WIDTH);
    let length = rng.random_range(MIN_LENGTH..=MAX_LENGTH);
    let angle_deg = rng.random_range(0.0..180.0);
    let center_x = rng.random_range(0.0..image_size.0 as f64);
    let center_y = rng.random_range(0.0..image_size.1 as f64);
    Ok(Stick {
        center_x,
        center_y,
        angle_deg,
        width,
        length,
        brightness: DEFAULT_BRIGHTNESS,
    })
}

/// Pixels whose centers fall in at least one stick are foreground. Sticks
/// crossing the border are clipped.
pub fn rasterize(sticks: &[Stick], image_size: (usize, usize)) -> MaskImage {
    let mut mask = MaskImage::new(image_size.0, image_size.1);
    for s in sticks {
        s.for_each_pixel(image_size, |x, y| mask.set(x, y, true));
    }
    mask.with_sticks(sticks.to_vec())
}

/// Mask with exactly `count` independently placed (possibly overlapping) sticks.
pub fn simulate_mask<R: Rng + ?Sized>(count: usize, image_size: (usize, usize), rng: &mut R) -> Result<MaskImage> {
    let sticks = (0..count)
        .map(|_| sample_stick(rng, image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(rasterize(&sticks, image_size))
}

pub fn sample_macro_count<R: Rng + ?Sized>(dist: &CountDistribution, rng: &mut R) -> usize {
    rng.random_range(dist.low..=dist.high) as usize
}

/// Mask whose sticks lie fully inside the image and never touch each other,
/// not even diagonally, so each stick is its own 8-connected component.
///
/// Sticks are drawn by rejection; fails after `max_attempts` rejected draws.
pub fn simulate_separated_mask<R: Rng + ?Sized>(
    count: usize,
    image_size: (usize, usize),
    rng: &mut R,
    max_attempts: usize,
) -> Result<MaskImage> {
    let (w, h) = image_size;
    let mut occupied = MaskImage::new(w, h);
    let mut sticks = Vec::with_capacity(count);
    let mut rejected = 0;
    while sticks.len() < count {
        let stick = sample_stick(rng, image_size)?;
        let mut pixels = Vec::new();
        let mut clipped = false;
        stick.for_each_pixel_unclipped(|x, y| {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                clipped = true;
            } else {
                pixels.push((x as usize, y as usize));
            }
        });
        let touches = pixels.iter().any(|&(x, y)| {
            (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|nx| occupied.get(nx, ny)))
        });
        if clipped || touches || pixels.is_empty() {
            rejected += 1;
            ensure_arg!(
                rejected < max_attempts,
                "could not place {count} separated sticks in {w}x{h} after {max_attempts} attempts"
            );
            continue;
        }
        for (x, y) in pixels {
            occupied.set(x, y, true);
        }
        sticks.push(stick);
    }
    let mask = rasterize(&sticks, image_size);
    debug_assert_eq!(mask.pixels(), occupied.pixels());
    Ok(mask)
}
