//! Synthetic two-color fluorescence data with known ground truth: magenta
//! stick bodies, a green blob at one end of each stick, blur and camera
//! noise. Used as a stand-in for microscopy data in tests and demos.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{add_noise, gaussian_smooth};
use crate::counter::FluorescenceFrame;
use crate::error::{ensure_arg, Result};
use crate::raster::{GrayImage, MaskImage};
use crate::simulator::{sample_stick, Stick};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub size: usize,
    pub min_sticks: usize,
    pub max_sticks: usize,
    pub min_body: u8,
    pub max_body: u8,
    pub tip_level: u8,
    pub tip_radius: f64,
    pub background: u8,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 256,
            min_sticks: 40,
            max_sticks: 90,
            min_body: 140,
            max_body: 230,
            tip_level: 220,
            tip_radius: 1.6,
            background: 12,
            blur_sigma: 1.0,
            noise_sigma: 6.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.min_sticks <= self.max_sticks, "min_sticks exceeds max_sticks");
        ensure_arg!(self.min_body <= self.max_body, "min_body exceeds max_body");
        ensure_arg!(self.tip_radius > 0.0, "tip radius must be positive");
        ensure_arg!(
            self.blur_sigma > 0.0 && self.noise_sigma >= 0.0,
            "bad blur or noise sigma"
        );
        Ok(())
    }
}

/// A rendered frame and the sticks it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomFrame {
    pub frame: FluorescenceFrame,
    pub sticks: Vec<Stick>,
    /// Which end of each stick carries the tip: `false` = first endpoint.
    pub tip_at_end: Vec<bool>,
}

impl PhantomFrame {
    pub fn centerline(&self) -> MaskImage {
        centerline(&self.sticks, self.frame.dims())
    }
}

fn tip_center(stick: &Stick, at_end: bool) -> (f64, f64) {
    let (a, b) = stick.endpoints();
    let (sin, cos) = stick.angle_deg.to_radians().sin_cos();
    if at_end {
        (b.0 + cos, b.1 + sin)
    } else {
        (a.0 - cos, a.1 - sin)
    }
}

/// Draws sticks (body intensity from `Stick::brightness`) and tips, then
/// blurs and adds noise per channel.
pub fn render<R: Rng + ?Sized>(
    sticks: &[Stick],
    tip_at_end: &[bool],
    cfg: &PhantomConfig,
    rng: &mut R,
) -> Result<FluorescenceFrame> {
    cfg.validate()?;
    ensure_arg!(sticks.len() == tip_at_end.len(), "one tip flag per stick required");
    let n = cfg.size;
    let mut body = GrayImage::filled(n, n, cfg.background);
    let mut tip = GrayImage::filled(n, n, cfg.background / 2);
    for s in sticks {
        s.for_each_pixel((n, n), |x, y| {
            if s.brightness > body.get(x, y) {
                body.set(x, y, s.brightness);
            }
        });
    }
    let r = cfg.tip_radius;
    for (s, &end) in sticks.iter().zip(tip_at_end) {
        let (cx, cy) = tip_center(s, end);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as i64).clamp(0, n as i64 - 1) as usize;
        let y1 = ((cy + r).ceil() as i64).clamp(0, n as i64 - 1) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    tip.set(x, y, cfg.tip_level);
                    body.set(x, y, body.get(x, y) / 4);
                }
            }
        }
    }
    let finish = |img: &GrayImage, rng: &mut R| -> Result<GrayImage> {
        let smooth = gaussian_smooth(img, 5, cfg.blur_sigma)?;
        if cfg.noise_sigma > 0.0 {
            add_noise(&smooth, cfg.noise_sigma, rng)
        } else {
            Ok(smooth)
        }
    };
    let red = finish(&body, rng)?;
    let green = finish(&tip, rng)?;
    let blue = finish(&body, rng)?;
    let rgb = (0..n * n)
        .map(|i| [red.pixels()[i], green.pixels()[i], blue.pixels()[i]])
        .collect();
    FluorescenceFrame::from_rgb(n, n, rgb)
}

/// A frame with a uniformly drawn number of sticks.
pub fn generate<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<PhantomFrame> {
    cfg.validate()?;
    let count = rng.random_range(cfg.min_sticks..=cfg.max_sticks);
    let mut sticks = Vec::with_capacity(count);
    let mut tips = Vec::with_capacity(count);
    for _ in 0..count {
        let mut s = sample_stick(rng, (cfg.size, cfg.size))?;
        s.brightness = rng.random_range(cfg.min_body..=cfg.max_body);
        sticks.push(s);
        tips.push(rng.random::<bool>());
    }
    let frame = render(&sticks, &tips, cfg, rng)?;
    Ok(PhantomFrame {
        frame,
        sticks,
        tip_at_end: tips,
    })
}

/// `n_frames` frames of one scene whose sticks jitter slightly between
/// frames, like a short time-lapse.
pub fn generate_video<R: Rng + ?Sized>(cfg: &PhantomConfig, n_frames: usize, rng: &mut R) -> Result<Vec<PhantomFrame>> {
    let base = generate(cfg, rng)?;
    let limit = cfg.size as f64 - 1e-9;
    (0..n_frames)
        .map(|_| {
            let sticks: Vec<Stick> = base
                .sticks
                .iter()
                .map(|s| {
                    let mut s = *s;
                    s.center_x = (s.center_x + rng.random_range(-1.0..1.0)).clamp(0.0, limit);
                    s.center_y = (s.center_y + rng.random_range(-1.0..1.0)).clamp(0.0, limit);
                    s.angle_deg = (s.angle_deg + rng.random_range(-3.0..3.0)).rem_euclid(180.0);
                    s
                })
                .collect();
            let frame = render(&sticks, &base.tip_at_end, cfg, rng)?;
            Ok(PhantomFrame {
                frame,
                sticks,
                tip_at_end: base.tip_at_end.clone(),
            })
        })
        .collect()
}

/// One-pixel, 8-connected medial lines of the sticks, clipped to the image.
pub fn centerline(sticks: &[Stick], image_size: (usize, usize)) -> MaskImage {
    let (w, h) = image_size;
    let mut mask = MaskImage::new(w, h);
    for s in sticks {
        let (sin, cos) = s.angle_deg.to_radians().sin_cos();
        // first and last pixel centers along the axis of the half-open body
        let hl = s.length as f64 / 2.0;
        let pixel = |t: f64| {
            let x = s.center_x + t * cos - 0.5;
            let y = s.center_y + t * sin - 0.5;
            (x.round() as i64, y.round() as i64)
        };
        let (p0, p1) = (pixel(-hl), pixel(hl - 1.0));
        for (x, y) in line_pixels(p0, p1) {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
    mask
}

/// Bresenham line, both ends included.
fn line_pixels((x0, y0): (i64, i64), (x1, y1): (i64, i64)) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::{estimate_count, ThresholdMethod, DEFAULT_MIN_AREA};
    use crate::rng::seeded;

    #[test]
    fn lines_are_thin_and_connected() {
        let pts = line_pixels((0, 0), (7, 3));
        assert_eq!(pts.len(), 8);
        for w in pts.windows(2) {
            assert!((w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1);
        }
        assert_eq!(line_pixels((2, 2), (2, 2)), vec![(2, 2)]);
    }

    #[test]
    fn centerline_lies_inside_horizontal_stick() {
        let s = Stick {
            center_x: 20.0,
            center_y: 20.5,
            angle_deg: 0.0,
            width: 3,
            length: 11,
            brightness: 200,
        };
        let c = centerline(&[s], (40, 40));
        assert_eq!(c.foreground_count(), 11);
        let body = crate::simulator::rasterize(&[s], (40, 40));
        for y in 0..40 {
            for x in 0..40 {
                if c.get(x, y) {
                    assert!(body.get(x, y));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_countable() {
        let cfg = PhantomConfig {
            min_sticks: 10,
            max_sticks: 10,
            ..Default::default()
        };
        let a = generate(&cfg, &mut seeded(3)).unwrap();
        let b = generate(&cfg, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sticks.len(), 10);
        let est = estimate_count(&a.frame, ThresholdMethod::Otsu, DEFAULT_MIN_AREA).unwrap();
        assert!((5..=12).contains(&est.count), "count {}", est.count);
    }

    #[test]
    fn video_frames_share_the_scene() {
        let cfg = PhantomConfig::default();
        let v = generate_video(&cfg, 3, &mut seeded(9)).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0].sticks.len(), v[2].sticks.len());
        assert_ne!(v[0].frame, v[1].frame);
    }
}
