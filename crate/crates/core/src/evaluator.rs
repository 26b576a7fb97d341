//! Dice evaluation of predicted masks against centerline annotations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{ensure_arg, Error, Result};
use crate::pairing::MatchingMode;
use crate::par;
use crate::raster::MaskImage;

pub const MIN_WIDTH: u32 = 1;
pub const MAX_WIDTH: u32 = 5;
pub const ALL_WIDTHS: [u32; 5] = [1, 2, 3, 4, 5];

/// One-pixel-wide traced centerlines for one test frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterlineAnnotation {
    pub pixels: MaskImage,
    pub frame_index: usize,
}

impl CenterlineAnnotation {
    pub fn new(pixels: MaskImage, frame_index: usize) -> Self {
        CenterlineAnnotation { pixels, frame_index }
    }
}

/// Offsets of the disk structuring element for width `w`: every `(dx, dy)`
/// with Euclidean length at most `(w - 1) / 2`.
pub fn disk_offsets(w: u32) -> Result<Vec<(i64, i64)>> {
    ensure_arg!(
        (MIN_WIDTH..=MAX_WIDTH).contains(&w),
        "width must be in {MIN_WIDTH}..={MAX_WIDTH}, got {w}"
    );
    let d = (w - 1) as i64;
    let r = d / 2 + 1;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            // |(dx, dy)| <= d / 2, squared and doubled to stay in integers
            if 4 * (dx * dx + dy * dy) <= d * d {
                out.push((dx, dy));
            }
        }
    }
    Ok(out)
}

/// Dilates a binary mask with the width-`w` disk.
pub fn dilate_mask(mask: &MaskImage, w: u32) -> Result<MaskImage> {
    let offsets = disk_offsets(w)?;
    let (width, height) = mask.dims();
    let mut out = vec![0u8; width * height];
    let src = mask.pixels();
    par::for_each_chunk_mut(&mut out, width.max(1), |y, row| {
        for (x, px) in row.iter_mut().enumerate() {
            *px = offsets.iter().any(|&(dx, dy)| {
                let sx = x as i64 - dx;
                let sy = y as i64 - dy;
                sx >= 0
                    && sy >= 0
                    && (sx as usize) < width
                    && (sy as usize) < height
                    && src[sy as usize * width + sx as usize] != 0
            }) as u8;
        }
    });
    MaskImage::from_raw(width, height, out)
}

/// Ground-truth mask of stroke width `w` (`w = 1` returns the centerline).
pub fn dilate_to_width(ann: &CenterlineAnnotation, w: u32) -> Result<MaskImage> {
    dilate_mask(&ann.pixels, w)
}

/// `2|P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred: &MaskImage, gt: &MaskImage) -> Result<f64> {
    ensure_arg!(
        pred.dims() == gt.dims(),
        "mask shapes differ: {:?} vs {:?}",
        pred.dims(),
        gt.dims()
    );
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.pixels().iter().zip(gt.pixels()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as u64;
        p += a as u64;
        g += b as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Per-width means plus the per-frame values they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthScores {
    pub widths: Vec<u32>,
    /// `means[j]` is the mean over frames at `widths[j]`.
    pub means: Vec<f64>,
    /// `per_frame[i][j]`: frame `i` at `widths[j]`.
    pub per_frame: Vec<Vec<f64>>,
    pub frame_indices: Vec<usize>,
}

/// Mean Dice over frames for each width; frames are matched by position.
pub fn evaluate(preds: &[MaskImage], anns: &[CenterlineAnnotation], widths: &[u32]) -> Result<WidthScores> {
    ensure_arg!(
        preds.len() == anns.len(),
        "{} predictions for {} annotations",
        preds.len(),
        anns.len()
    );
    ensure_arg!(!preds.is_empty(), "nothing to evaluate");
    ensure_arg!(!widths.is_empty(), "no widths given");
    for &w in widths {
        disk_offsets(w)?;
    }
    let per_frame = par::map_indexed(preds.len(), |i| -> Result<Vec<f64>> {
        widths
            .iter()
            .map(|&w| dice_score(&preds[i], &dilate_to_width(&anns[i], w)?))
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    let means = (0..widths.len())
        .map(|j| per_frame.iter().map(|f| f[j]).sum::<f64>() / n)
        .collect();
    Ok(WidthScores {
        widths: widths.to_vec(),
        means,
        per_frame,
        frame_indices: anns.iter().map(|a| a.frame_index).collect(),
    })
}

/// One experiment's row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub matching: MatchingMode,
    pub smooth: bool,
    pub noise: bool,
    pub brightness: bool,
    pub scores: WidthScores,
}

impl ReportRow {
    pub fn new(
        experiment_id: impl Into<String>,
        matching: MatchingMode,
        aug: &AugmentationConfig,
        scores: WidthScores,
    ) -> Self {
        ReportRow {
            experiment_id: experiment_id.into(),
            matching,
            smooth: aug.smooth,
            noise: aug.noise,
            brightness: aug.brightness,
            scores,
        }
    }
}

/// Table of mean Dice per experiment and ground-truth width.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub rows: Vec<ReportRow>,
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

impl DiceReport {
    fn widths(&self) -> Result<Vec<u32>> {
        let widths = self
            .rows
            .first()
            .map(|r| r.scores.widths.clone())
            .unwrap_or_else(|| ALL_WIDTHS.to_vec());
        for r in &self.rows {
            if r.scores.widths != widths {
                return Err(Error::invalid("report rows use different width sets"));
            }
        }
        Ok(widths)
    }

    /// `experiment_id, matching, smooth, noise, brightness, D_w1, ...` with
    /// four decimals.
    pub fn to_csv(&self) -> Result<String> {
        let widths = self.widths()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "experiment_id".to_string(),
            "matching".into(),
            "smooth".into(),
            "noise".into(),
            "brightness".into(),
        ];
        header.extend(widths.iter().map(|w| format!("D_w{w}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.experiment_id.clone(),
                r.matching.to_string(),
                flag(r.smooth).into(),
                flag(r.noise).into(),
                flag(r.brightness).into(),
            ];
            rec.extend(r.scores.means.iter().map(|m| format!("{m:.4}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Long format: one line per experiment and frame.
    pub fn write_per_frame_csv(&self, path: &Path) -> Result<()> {
        let widths = self.widths()?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["experiment_id".to_string(), "frame_index".into()];
        header.extend(widths.iter().map(|w| format!("D_w{w}")));
        w.write_record(&header)?;
        for r in &self.rows {
            for (i, frame) in r.scores.per_frame.iter().enumerate() {
                let mut rec = vec![r.experiment_id.clone(), r.scores.frame_indices[i].to_string()];
                rec.extend(frame.iter().map(|d| format!("{d:.6}")));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
