//! PNG, stick-list and CSV files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::counter::FluorescenceFrame;
use crate::error::{Error, Result};
use crate::raster::{GrayImage, MaskImage, ProbMap};
use crate::simulator::Stick;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale. Color files are converted with the same luma weights as
/// [`FluorescenceFrame::intensity`].
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            GrayImage::from_raw(w as usize, h as usize, g.into_raw())
        }
        other => Ok(rgb_to_frame(other.to_rgb8())?.intensity()),
    }
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn rgb_to_frame(rgb: image::RgbImage) -> Result<FluorescenceFrame> {
    let (w, h) = rgb.dimensions();
    let px = rgb.pixels().map(|p| p.0).collect();
    FluorescenceFrame::from_rgb(w as usize, h as usize, px)
}

/// Three-channel frame; grayscale files get the same value in every channel.
pub fn read_rgb(path: &Path) -> Result<FluorescenceFrame> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    rgb_to_frame(img.to_rgb8())
}

pub fn write_rgb(path: &Path, frame: &FluorescenceFrame) -> Result<()> {
    let data: Vec<u8> = frame.pixels().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, data)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Binary mask from a PNG: any pixel above 127 is foreground.
pub fn read_mask(path: &Path) -> Result<MaskImage> {
    Ok(MaskImage::from_gray(&read_gray(path)?, 127))
}

/// Writes `{0, 255}`.
pub fn write_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    write_gray(path, &mask.to_gray())
}

/// `round(255 p)` per pixel.
pub fn write_prob(path: &Path, p: &ProbMap) -> Result<()> {
    write_gray(path, &p.to_gray())
}

/// Stick-list sidecar next to a mask: `masks/0001.png` → `masks/0001.jsonl`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("jsonl")
}

/// One JSON object per line.
pub fn write_sticks(path: &Path, sticks: &[Stick]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sticks {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sticks(path: &Path) -> Result<Vec<Stick>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mask PNG plus its stick list, when a sidecar exists.
pub fn read_mask_with_sticks(png: &Path) -> Result<MaskImage> {
    let mask = read_mask(png)?;
    let side = sidecar_path(png);
    if side.exists() {
        Ok(mask.with_sticks(read_sticks(&side)?))
    } else {
        Ok(mask)
    }
}

/// Writes a mask and, if it carries one, its stick list.
pub fn write_mask_with_sticks(png: &Path, mask: &MaskImage) -> Result<()> {
    write_mask(png, mask)?;
    if let Some(sticks) = mask.sticks() {
        write_sticks(&sidecar_path(png), sticks)?;
    }
    Ok(())
}

/// PNG files in `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Leading decimal digits of the file stem: `0007_pred.png` → 7.
pub fn frame_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// PNGs in `dir` keyed by [`frame_index`], sorted by index. Files without a
/// leading number are an error, as are repeated indices.
pub fn indexed_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for p in list_pngs(dir)? {
        let i =
            frame_index(&p).ok_or_else(|| Error::invalid(format!("{}: file name has no frame index", p.display())))?;
        out.push((i, p));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!(
            "frame index {} appears twice in {}",
            w[0].0,
            dir.display()
        )));
    }
    Ok(out)
}

pub fn numbered(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:04}.png"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub filename: String,
    pub count: usize,
    pub threshold_used: u8,
    pub min_area_used: usize,
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One synthesis training pair of a built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub pair_index: usize,
    pub batch: usize,
    pub count: usize,
    pub seed: u64,
}
