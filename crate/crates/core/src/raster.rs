//! Single-channel rasters shared by every pipeline stage.
//!
//! All rasters are row-major with `(x, y)` addressing: `x` is the column and
//! `y` the row, so pixel `(x, y)` lives at `y * width + x`.

use crate::error::{ensure_arg, Result};
use crate::simulator::Stick;

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure_arg!(
            data.len() == width * height,
            "buffer of {} values does not match {}x{}",
            data.len(),
            width,
            height
        );
        Ok(GrayImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
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
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    /// Copy of the `size`×`size` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        ensure_arg!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop {}x{}@({},{}) exceeds {}x{}",
            w,
            h,
            x0,
            y0,
            self.width,
            self.height
        );
        Ok(GrayImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Pixel values as `f32` in `[0, 255]`.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Rounds and clips `values` into an 8-bit image.
    pub fn from_f32(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        ensure_arg!(values.len() == width * height, "buffer size mismatch");
        Ok(GrayImage {
            width,
            height,
            data: values.iter().map(|&v| clip_u8(v as f64)).collect(),
        })
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> GrayImage {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let out = resize_bilinear(&self.to_f32(), self.width, self.height, width, height);
        GrayImage::from_f32(width, height, &out).expect("resize output size")
    }
}

#[inline]
pub fn clip_u8(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Binary mask. When produced by the simulator it also carries the sticks
/// that were rasterized into it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
    sticks: Option<Vec<Stick>>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        MaskImage {
            width,
            height,
            data: vec![0; width * height],
            sticks: None,
        }
    }

    /// Builds a mask from arbitrary bytes; any non-zero value is foreground.
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure_arg!(
            data.len() == width * height,
            "buffer of {} values does not match {}x{}",
            data.len(),
            width,
            height
        );
        Ok(MaskImage {
            width,
            height,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
            sticks: None,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = MaskImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(x, y));
            }
        }
        m
    }

    pub(crate) fn with_sticks(mut self, sticks: Vec<Stick>) -> Self {
        self.sticks = Some(sticks);
        self
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
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    /// Pixel values, each 0 or 1.
    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn sticks(&self) -> Option<&[Stick]> {
        self.sticks.as_deref()
    }

    pub fn stick_count(&self) -> Option<usize> {
        self.sticks.as_ref().map(Vec::len)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Same pixels, stick list dropped.
    pub fn without_sticks(&self) -> MaskImage {
        MaskImage {
            sticks: None,
            ..self.clone()
        }
    }

    /// `{0, 255}` grayscale rendering.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }

    /// Foreground iff the gray value is strictly above `threshold`.
    pub fn from_gray(img: &GrayImage, threshold: u8) -> MaskImage {
        MaskImage {
            width: img.width(),
            height: img.height(),
            data: img.pixels().iter().map(|&v| u8::from(v > threshold)).collect(),
            sticks: None,
        }
    }

    /// Nearest-neighbour resize; keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> MaskImage {
        if (width, height) == self.dims() {
            return self.without_sticks();
        }
        MaskImage::from_fn(width, height, |x, y| {
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        ensure_arg!(data.len() == width * height, "buffer size mismatch");
        Ok(ProbMap { width, height, data })
    }

    pub fn filled(width: usize, height: usize, p: f32) -> Self {
        ProbMap {
            width,
            height,
            data: vec![p; width * height],
        }
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
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> ProbMap {
        if (width, height) == self.dims() {
            return self.clone();
        }
        ProbMap {
            width,
            height,
            data: resize_bilinear(&self.data, self.width, self.height, width, height),
        }
    }

    /// Foreground iff `p > threshold`.
    pub fn binarize(&self, threshold: f32) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| u8::from(p > threshold)).collect(),
            sticks: None,
        }
    }

    /// 8-bit rendering with value `round(255 p)`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| clip_u8(255.0 * p as f64)).collect(),
        }
    }
}

/// Bilinear interpolation of a row-major plane, half-pixel centers, edge clamp.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh);
    let axis = |dst: usize, src_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(dw, sw);
    let ys = axis(dh, sh);
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * sw..(y0 + 1) * sw];
        let r1 = &src[y1 * sw..(y1 + 1) * sw];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_is_exact() {
        let src = vec![0.37f32; 128 * 128];
        let up = resize_bilinear(&src, 128, 128, 256, 256);
        assert!(up.iter().all(|&v| v == 0.37));
        let down = resize_bilinear(&up, 256, 256, 128, 128);
        assert!(down.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn downscale_by_two_averages_blocks() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = resize_bilinear(&src, 4, 4, 2, 2);
        // block (0,0) covers 0,1,4,5
        assert_eq!(out[0], 2.5);
        assert_eq!(out[3], 12.5);
    }

    #[test]
    fn mask_from_raw_normalizes() {
        let m = MaskImage::from_raw(2, 1, vec![0, 255]).unwrap();
        assert_eq!(m.pixels(), &[0, 1]);
        assert!(MaskImage::from_raw(2, 2, vec![0]).is_err());
    }

    #[test]
    fn nearest_resize_stays_binary() {
        let m = MaskImage::from_fn(8, 8, |x, _| x < 4);
        let r = m.resize_nearest(4, 4);
        assert_eq!(r.foreground_count(), 8);
        assert!(r.pixels().iter().all(|&v| v <= 1));
    }
}
