use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use super::manifest::{ManifestEntry, Modality};
use crate::error::{FuseError, Result};
use crate::plane::Plane;

// BT.601 luma weights.
const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// Blue- and red-difference planes, centred on 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Chroma {
    pub cb: Plane,
    pub cr: Plane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub lum: Plane,
    pub chroma: Option<Chroma>,
    pub bit_depth: u8,
}

/// Which source contributed the chroma of a fused image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChromaSource {
    PathA,
    PathB,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub lum_a: Plane,
    pub lum_b: Plane,
    pub chroma_a: Option<Chroma>,
    pub chroma_b: Option<Chroma>,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
}

impl SamplePair {
    /// Chroma used for the fused output. Visible-image chroma for IVF,
    /// functional-image chroma for MIF, falling back to the other source.
    pub fn chroma_for(&self, modality: Modality) -> (ChromaSource, Option<&Chroma>) {
        let a = self.chroma_a.as_ref().map(|c| (ChromaSource::PathA, c));
        let b = self.chroma_b.as_ref().map(|c| (ChromaSource::PathB, c));
        let pick = match modality {
            Modality::Ivf => b.or(a),
            Modality::Mif => a.or(b),
        };
        match pick {
            Some((src, c)) => (src, Some(c)),
            None => (ChromaSource::None, None),
        }
    }
}

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = KR * r + KG * g + KB * b;
    let cb = 0.5 + (b - y) / (2.0 * (1.0 - KB));
    let cr = 0.5 + (r - y) / (2.0 * (1.0 - KR));
    (y, cb, cr)
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 2.0 * (1.0 - KR) * (cr - 0.5);
    let b = y + 2.0 * (1.0 - KB) * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    (r, g, b)
}

fn from_rgb(w: usize, h: usize, pixels: impl Iterator<Item = [f64; 3]>) -> (Plane, Chroma) {
    let n = w * h;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for [r, g, b] in pixels {
        let (py, pb, pr) = rgb_to_ycbcr(r, g, b);
        y.push(py);
        cb.push(pb);
        cr.push(pr);
    }
    let plane = |data| Plane {
        width: w,
        height: h,
        data,
    };
    (
        plane(y),
        Chroma {
            cb: plane(cb),
            cr: plane(cr),
        },
    )
}

/// Decodes an 8- or 16-bit grayscale or RGB(A) image into `[0, 1]`.
/// Alpha is discarded.
pub fn load_image(path: &Path) -> Result<LoadedImage> {
    let img_err = |source| FuseError::Image {
        path: path.to_path_buf(),
        source,
    };
    let img = ImageReader::open(path)
        .map_err(|e| FuseError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| FuseError::io(path, e))?
        .decode()
        .map_err(img_err)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = |data: Vec<f64>, bit_depth| LoadedImage {
        lum: Plane {
            width: w,
            height: h,
            data,
        },
        chroma: None,
        bit_depth,
    };
    let color = |(lum, chroma), bit_depth| LoadedImage {
        lum,
        chroma: Some(chroma),
        bit_depth,
    };
    Ok(match img {
        DynamicImage::ImageLuma8(b) => gray(b.as_raw().iter().map(|&v| v as f64 / 255.0).collect(), 8),
        DynamicImage::ImageLumaA8(b) => gray(b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), 8),
        DynamicImage::ImageLuma16(b) => gray(b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(), 16),
        DynamicImage::ImageLumaA16(b) => gray(b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(), 16),
        DynamicImage::ImageRgb8(b) => color(from_rgb(w, h, b.pixels().map(|p| p.0.map(|v| v as f64 / 255.0))), 8),
        DynamicImage::ImageRgba8(b) => color(
            from_rgb(w, h, b.pixels().map(|p| [0, 1, 2].map(|i| p.0[i] as f64 / 255.0))),
            8,
        ),
        DynamicImage::ImageRgb16(b) => {
            color(from_rgb(w, h, b.pixels().map(|p| p.0.map(|v| v as f64 / 65535.0))), 16)
        }
        DynamicImage::ImageRgba16(b) => color(
            from_rgb(w, h, b.pixels().map(|p| [0, 1, 2].map(|i| p.0[i] as f64 / 65535.0))),
            16,
        ),
        other => {
            return Err(FuseError::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    })
}

pub fn load_pair(entry: &ManifestEntry) -> Result<SamplePair> {
    let a = load_image(&entry.path_a)?;
    let b = load_image(&entry.path_b)?;
    if !a.lum.same_dims(&b.lum) {
        return Err(FuseError::Data(format!(
            "pair size mismatch: {} is {}x{}, {} is {}x{}",
            entry.path_a.display(),
            a.lum.width,
            a.lum.height,
            entry.path_b.display(),
            b.lum.width,
            b.lum.height
        )));
    }
    Ok(SamplePair {
        lum_a: a.lum,
        lum_b: b.lum,
        chroma_a: a.chroma,
        chroma_b: b.chroma,
        path_a: entry.path_a.clone(),
        path_b: entry.path_b.clone(),
    })
}

#[inline]
fn quantize8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    }
    Ok(())
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, ImageFormat::Png).map_err(|source| match source {
        image::ImageError::IoError(e) => FuseError::io(path, e),
        source => FuseError::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

pub fn write_gray(lum: &Plane, path: &Path) -> Result<()> {
    let data = lum.data.iter().map(|&v| quantize8(v)).collect();
    let buf = image::GrayImage::from_raw(lum.width as u32, lum.height as u32, data)
        .ok_or_else(|| FuseError::shape("plane buffer does not match its dimensions"))?;
    save(DynamicImage::ImageLuma8(buf), path)
}

/// Writes an 8-bit PNG. With chroma the luminance is recombined into RGB.
pub fn write_fused(lum: &Plane, chroma: Option<&Chroma>, path: &Path) -> Result<()> {
    let Some(ch) = chroma else {
        return write_gray(lum, path);
    };
    if !lum.same_dims(&ch.cb) || !lum.same_dims(&ch.cr) {
        return Err(FuseError::shape(format!(
            "chroma {:?} does not match luminance {:?}",
            ch.cb.dims(),
            lum.dims()
        )));
    }
    let mut data = Vec::with_capacity(3 * lum.data.len());
    for i in 0..lum.data.len() {
        let (r, g, b) = ycbcr_to_rgb(lum.data[i], ch.cb.data[i], ch.cr.data[i]);
        data.extend([quantize8(r), quantize8(g), quantize8(b)]);
    }
    let buf = image::RgbImage::from_raw(lum.width as u32, lum.height as u32, data)
        .ok_or_else(|| FuseError::shape("plane buffer does not match its dimensions"))?;
    save(DynamicImage::ImageRgb8(buf), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ycbcr_round_trip_and_neutral_gray() {
        for &(r, g, b) in &[(0.2, 0.7, 0.1), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.33, 0.33, 0.33)] {
            let (y, cb, cr) = rgb_to_ycbcr(r, g, b);
            let (r2, g2, b2) = ycbcr_to_rgb(y, cb, cr);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
        let (y, cb, cr) = rgb_to_ycbcr(0.4, 0.4, 0.4);
        assert!((y - 0.4).abs() < 1e-15 && (cb - 0.5).abs() < 1e-15 && (cr - 0.5).abs() < 1e-15);
        assert!((rgb_to_ycbcr(1.0, 0.0, 0.0).0 - 0.299).abs() < 1e-15);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize8(0.5), 128);
        assert_eq!(quantize8(1.0), 255);
        assert_eq!(quantize8(-0.1), 0);
        assert_eq!(quantize8(0.5 / 255.0), 1);
    }

    #[test]
    fn chroma_preference_follows_modality() {
        let p = Plane::filled(2, 2, 0.5);
        let ch = Chroma {
            cb: p.clone(),
            cr: p.clone(),
        };
        let pair = SamplePair {
            lum_a: p.clone(),
            lum_b: p.clone(),
            chroma_a: Some(ch.clone()),
            chroma_b: Some(ch),
            path_a: "a".into(),
            path_b: "b".into(),
        };
        assert_eq!(pair.chroma_for(Modality::Ivf).0, ChromaSource::PathB);
        assert_eq!(pair.chroma_for(Modality::Mif).0, ChromaSource::PathA);
    }
}
