//! Whole-frame inference by quadrant splitting and re-assembly.

use crate::error::{ensure_arg, Result};
use crate::par;
use crate::raster::{GrayImage, MaskImage, ProbMap};

pub const FRAME_SIZE: usize = 256;
pub const QUADRANT_SIZE: usize = FRAME_SIZE / 2;

/// One 256×256 test frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: GrayImage,
    pub frame_index: usize,
}

impl Frame {
    pub fn new(pixels: GrayImage, frame_index: usize) -> Result<Self> {
        ensure_arg!(
            pixels.dims() == (FRAME_SIZE, FRAME_SIZE),
            "frame must be {FRAME_SIZE}x{FRAME_SIZE}, got {}x{}",
            pixels.width(),
            pixels.height()
        );
        Ok(Frame { pixels, frame_index })
    }

    pub fn pixels(&self) -> &GrayImage {
        &self.pixels
    }
}

/// Model that maps a square patch to per-pixel foreground probabilities.
pub trait PatchSegmenter: Sync {
    /// Side length the model expects its input resized to.
    fn input_size(&self) -> usize;
    fn predict_patch(&self, patch: &GrayImage) -> Result<ProbMap>;
}

/// Quadrants in order top-left, top-right, bottom-left, bottom-right.
pub fn split_quadrants(frame: &Frame) -> [GrayImage; 4] {
    let q = QUADRANT_SIZE;
    let crop = |x0, y0| frame.pixels.crop(x0, y0, q, q).expect("inside frame");
    [crop(0, 0), crop(q, 0), crop(0, q), crop(q, q)]
}

/// Inverse of [`split_quadrants`].
pub fn stitch(quadrants: &[GrayImage], frame_index: usize) -> Result<Frame> {
    check_quadrants(quadrants.iter().map(GrayImage::dims))?;
    let data = join(quadrants.iter().map(GrayImage::pixels).collect::<Vec<_>>().as_slice());
    Frame::new(GrayImage::from_raw(FRAME_SIZE, FRAME_SIZE, data)?, frame_index)
}

pub fn stitch_probabilities(quadrants: &[ProbMap]) -> Result<ProbMap> {
    check_quadrants(quadrants.iter().map(ProbMap::dims))?;
    let data = join(quadrants.iter().map(ProbMap::values).collect::<Vec<_>>().as_slice());
    ProbMap::from_raw(FRAME_SIZE, FRAME_SIZE, data)
}

fn check_quadrants(dims: impl ExactSizeIterator<Item = (usize, usize)>) -> Result<()> {
    ensure_arg!(dims.len() == 4, "expected 4 quadrants, got {}", dims.len());
    for (i, d) in dims.enumerate() {
        ensure_arg!(
            d == (QUADRANT_SIZE, QUADRANT_SIZE),
            "quadrant {i} is {}x{}, expected {QUADRANT_SIZE}x{QUADRANT_SIZE}",
            d.0,
            d.1
        );
    }
    Ok(())
}

fn join<T: Copy>(quads: &[&[T]]) -> Vec<T> {
    let q = QUADRANT_SIZE;
    let mut out = Vec::with_capacity(FRAME_SIZE * FRAME_SIZE);
    for half in [0, 2] {
        for y in 0..q {
            out.extend_from_slice(&quads[half][y * q..(y + 1) * q]);
            out.extend_from_slice(&quads[half + 1][y * q..(y + 1) * q]);
        }
    }
    out
}

/// Probability map for a whole frame: every quadrant is resized to the
/// model input, predicted, and resized back before stitching.
pub fn predict_frame<M: PatchSegmenter>(model: &M, frame: &Frame) -> Result<ProbMap> {
    let s = model.input_size();
    let quads = split_quadrants(frame);
    let probs = par::map_slice(&quads, |q| -> Result<ProbMap> {
        let p = model.predict_patch(&q.resize_bilinear(s, s))?;
        Ok(p.resize_bilinear(QUADRANT_SIZE, QUADRANT_SIZE))
    });
    let probs = probs.into_iter().collect::<Result<Vec<_>>>()?;
    stitch_probabilities(&probs)
}

/// Binary 256×256 segmentation: stitched probabilities thresholded once.
pub fn segment_frame<M: PatchSegmenter>(model: &M, frame: &Frame, threshold: f64) -> Result<MaskImage> {
    Ok(predict_frame(model, frame)?.binarize(threshold as f32))
}
