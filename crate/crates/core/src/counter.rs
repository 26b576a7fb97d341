//! Rough object counts from the tip-marker channel of fluorescence frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::raster::{GrayImage, MaskImage};

pub const DEFAULT_MIN_AREA: usize = 2;

/// RGB frame. Magenta (red + blue) marks object bodies, green marks tips.
#[derive(Debug, Clone, PartialEq)]
pub struct FluorescenceFrame {
    width: usize,
    height: usize,
    rgb: Vec<[u8; 3]>,
    /// Physical pixel size in micrometres; metadata only.
    pub pixel_size: f64,
}

impl FluorescenceFrame {
    pub fn new(width: usize, height: usize) -> Self {
        FluorescenceFrame {
            width,
            height,
            rgb: vec![[0; 3]; width * height],
            pixel_size: 1.1,
        }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: Vec<[u8; 3]>) -> Result<Self> {
        ensure_arg!(rgb.len() == width * height, "rgb buffer size mismatch");
        Ok(FluorescenceFrame {
            width,
            height,
            rgb,
            pixel_size: 1.1,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.rgb[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [u8; 3]) {
        self.rgb[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.rgb
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        ensure_arg!(x0 + w <= self.width && y0 + h <= self.height, "crop exceeds frame");
        let mut rgb = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            rgb.extend_from_slice(&self.rgb[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(FluorescenceFrame {
            width: w,
            height: h,
            rgb,
            pixel_size: self.pixel_size,
        })
    }

    /// Single-channel intensity (ITU-R BT.601 luma) used as the real-image domain.
    pub fn intensity(&self) -> GrayImage {
        let data = self
            .rgb
            .iter()
            .map(|&[r, g, b]| ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8)
            .collect();
        GrayImage::from_raw(self.width, self.height, data).expect("same size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEstimate {
    pub count: usize,
    pub threshold_used: u8,
    pub min_area_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdMethod {
    #[default]
    Otsu,
    Fixed(u8),
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "otsu" {
            return Ok(ThresholdMethod::Otsu);
        }
        let t = s
            .strip_prefix("fixed:")
            .ok_or_else(|| Error::invalid(format!("unknown threshold method {s:?}")))?;
        t.parse::<u8>()
            .map(ThresholdMethod::Fixed)
            .map_err(|_| Error::invalid(format!("fixed threshold {t:?} is not in 0..=255")))
    }
}

impl TryFrom<String> for ThresholdMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ThresholdMethod> for String {
    fn from(m: ThresholdMethod) -> String {
        m.to_string()
    }
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMethod::Otsu => f.write_str("otsu"),
            ThresholdMethod::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

/// Tip signal `max(0, G - max(R, B))`: pure green survives, magenta and
/// white do not.
pub fn extract_tip_channel(frame: &FluorescenceFrame) -> GrayImage {
    let data = frame
        .pixels()
        .iter()
        .map(|&[r, g, b]| g.saturating_sub(r.max(b)))
        .collect();
    GrayImage::from_raw(frame.width(), frame.height(), data).expect("same size")
}

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in img.pixels() {
        h[v as usize] += 1;
    }
    h
}

/// Otsu threshold `t`: classes are `v <= t` and `v > t`; the first `t`
/// maximizing the between-class variance wins.
pub fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let (mut best_t, mut best) = (0u8, -1.0f64);
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

/// Foreground iff value > threshold. Returns the mask and the threshold used.
pub fn binarize(img: &GrayImage, method: ThresholdMethod) -> (MaskImage, u8) {
    let t = match method {
        ThresholdMethod::Fixed(t) => t,
        ThresholdMethod::Otsu => otsu_threshold(&histogram(img)),
    };
    (MaskImage::from_gray(img, t), t)
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass 8-connected labeling. Returns per-pixel labels (0 = background,
/// components numbered from 1 in raster order of first pixel) and the area
/// of each component (`areas[k]` for label `k + 1`).
pub fn label_components(mask: &MaskImage) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            if x > 0 && labels[y * w + x - 1] != 0 {
                neighbours[n] = labels[y * w + x - 1];
                n += 1;
            }
            if y > 0 {
                let row = (y - 1) * w;
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if labels[row + nx] != 0 {
                        neighbours[n] = labels[row + nx];
                        n += 1;
                    }
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let m = *neighbours[..n].iter().min().unwrap();
                for &other in &neighbours[..n] {
                    union(&mut parent, m, other);
                }
                m
            };
            labels[y * w + x] = label;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut areas = Vec::new();
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            areas.push(0);
            remap[root] = areas.len() as u32;
        }
        *l = remap[root];
        areas[*l as usize - 1] += 1;
    }
    (labels, areas)
}

/// Number of 8-connected foreground components with at least `min_area` pixels.
pub fn count_components(mask: &MaskImage, min_area: usize) -> Result<usize> {
    ensure_arg!(min_area >= 1, "min_area must be at least 1");
    let (_, areas) = label_components(mask);
    Ok(areas.iter().filter(|&&a| a >= min_area).count())
}

pub fn estimate_count(frame: &FluorescenceFrame, method: ThresholdMethod, min_area: usize) -> Result<CountEstimate> {
    let tips = extract_tip_channel(frame);
    let (mask, threshold_used) = binarize(&tips, method);
    Ok(CountEstimate {
        count: count_components(&mask, min_area)?,
        threshold_used,
        min_area_used: min_area,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_of(pixels: &[[u8; 3]]) -> FluorescenceFrame {
        FluorescenceFrame::from_rgb(pixels.len(), 1, pixels.to_vec()).unwrap()
    }

    #[test]
    fn tip_channel_formula() {
        let f = frame_of(&[[0, 255, 0], [255, 0, 255], [10, 200, 30], [255, 255, 255]]);
        assert_eq!(extract_tip_channel(&f).pixels(), &[255, 0, 170, 0]);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("otsu".parse::<ThresholdMethod>().unwrap(), ThresholdMethod::Otsu);
        assert_eq!(
            "fixed:127".parse::<ThresholdMethod>().unwrap(),
            ThresholdMethod::Fixed(127)
        );
        assert!("fixed:300".parse::<ThresholdMethod>().is_err());
        assert!("mean".parse::<ThresholdMethod>().is_err());
        assert_eq!(ThresholdMethod::Fixed(9).to_string(), "fixed:9");
    }

    #[test]
    fn fixed_thresholds() {
        let zero = GrayImage::new(6, 6);
        assert_eq!(binarize(&zero, ThresholdMethod::Fixed(0)).0.foreground_count(), 0);
        let checker = GrayImage::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
        let (m, t) = binarize(&checker, ThresholdMethod::Fixed(127));
        assert_eq!(t, 127);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(x, y), (x + y) % 2 == 0);
            }
        }
    }

    #[test]
    fn otsu_matches_exhaustive_sweep() {
        let img = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 10 } else { 240 });
        let (m, t) = binarize(&img, ThresholdMethod::Otsu);
        assert!((10..240).contains(&t));
        assert_eq!(m.foreground_count(), 128);
        assert!(m.get(12, 3) && !m.get(2, 3));

        // exhaustive between-class variance over a skewed histogram
        let img = GrayImage::from_fn(20, 20, |x, y| ((x * 13 + y * 7) % 97) as u8 + (x as u8) * 6);
        let hist = histogram(&img);
        let n = 400.0;
        let mut best = (0u8, -1.0);
        for t in 0..255usize {
            let (c0, c1): (Vec<_>, Vec<_>) = img.pixels().iter().partition(|&&v| (v as usize) <= t);
            if c0.is_empty() || c1.is_empty() {
                continue;
            }
            let m0 = c0.iter().map(|&&v| v as f64).sum::<f64>() / c0.len() as f64;
            let m1 = c1.iter().map(|&&v| v as f64).sum::<f64>() / c1.len() as f64;
            let var = (c0.len() as f64 / n) * (c1.len() as f64 / n) * (m0 - m1).powi(2);
            if var > best.1 + 1e-9 {
                best = (t as u8, var);
            }
        }
        assert_eq!(otsu_threshold(&hist), best.0);
    }

    #[test]
    fn component_counting_edge_cases() {
        let empty = MaskImage::new(10, 10);
        assert_eq!(count_components(&empty, 1).unwrap(), 0);
        let mut two = MaskImage::new(10, 10);
        for (ox, oy) in [(0, 0), (5, 5)] {
            for y in 0..3 {
                for x in 0..3 {
                    two.set(ox + x, oy + y, true);
                }
            }
        }
        assert_eq!(count_components(&two, 1).unwrap(), 2);
        let mut single = MaskImage::new(4, 4);
        single.set(1, 1, true);
        assert_eq!(count_components(&single, 2).unwrap(), 0);
        assert_eq!(count_components(&single, 1).unwrap(), 1);
        assert!(count_components(&single, 0).is_err());
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = MaskImage::from_fn(5, 5, |x, y| x == y);
        assert_eq!(count_components(&m, 1).unwrap(), 1);
        // a "V" merging late in raster order
        let v = MaskImage::from_fn(7, 4, |x, y| (x == y) || (x == 6 - y));
        let (labels, areas) = label_components(&v);
        assert_eq!(areas.len(), 1);
        assert!(labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn black_frame_counts_zero() {
        let f = FluorescenceFrame::new(32, 32);
        assert_eq!(estimate_count(&f, ThresholdMethod::Otsu, 2).unwrap().count, 0);
    }
}
