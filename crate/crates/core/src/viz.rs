//! Heat-map grids of feature maps.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{FuseError, Result};
use crate::ops::dims4;

/// Piecewise-linear blue-cyan-yellow-red map of `v` in `[0, 1]`.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.4, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let i = STOPS.iter().rposition(|(p, _)| *p <= v).unwrap_or(0).min(STOPS.len() - 2);
    let (p0, c0) = STOPS[i];
    let (p1, c1) = STOPS[i + 1];
    let t = (v - p0) / (p1 - p0);
    [0, 1, 2].map(|k| ((c0[k] + t * (c1[k] - c0[k])) * 255.0 + 0.5).floor() as u8)
}

/// Tiles every channel of the first item of `(B, C, H, W)` into a grid,
/// each channel min-max normalized on its own, separated by 1-pixel gaps.
pub fn feature_grid(features: &Tensor) -> Result<image::RgbImage> {
    let (_, c, h, w) = dims4(features)?;
    let data = features.get(0)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (ox, oy) = (1 + (ch % cols) * (w + 1), 1 + (ch / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                let v = (plane[y * w + x] - lo) / span;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(heat_color(v)));
            }
        }
    }
    Ok(img)
}

pub fn write_feature_grid(features: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    }
    feature_grid(features)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| FuseError::Image {
            path: path.to_path_buf(),
            source,
        })
}
