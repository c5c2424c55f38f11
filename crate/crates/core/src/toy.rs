//! Synthetic complementary image pairs for smoke tests and demos.
//!
//! Both images share a smooth background. The first ("infrared") adds bright
//! Gaussian blobs; the second ("visible") adds oriented high-frequency
//! texture, so the shared content is low frequency and the
//! modality-specific content differs between the two.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{write_fused, write_gray, Chroma, DatasetManifest, ManifestEntry, Modality, SamplePair, Split};
use crate::error::{FuseError, Result};
use crate::plane::Plane;

/// `(infrared, visible)` luminance planes of one pair.
pub fn toy_pair(size: usize, rng: &mut impl Rng) -> (Plane, Plane) {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(0.5..2.0) * 2.0 * PI / s;
            (angle.cos() * freq, angle.sin() * freq, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.05..0.12))
        })
        .collect();
    let background = Plane::from_fn(size, size, |x, y| {
        0.45 + waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum::<f64>()
    });

    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.1..0.9) * s,
                rng.gen_range(0.1..0.9) * s,
                rng.gen_range(0.04..0.1) * s,
                rng.gen_range(0.3..0.5),
            )
        })
        .collect();
    let ir = Plane::from_fn(size, size, |x, y| {
        let heat: f64 = blobs
            .iter()
            .map(|&(cx, cy, r, amp)| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                amp * (-d2 / (2.0 * r * r)).exp()
            })
            .sum();
        (0.7 * background.at(x, y) + heat).clamp(0.0, 1.0)
    });

    let angle = rng.gen_range(0.0..PI);
    let period = rng.gen_range(3.0..6.0);
    let (kx, ky) = (angle.cos() * 2.0 * PI / period, angle.sin() * 2.0 * PI / period);
    let tiles = rng.gen_range(4..8) as f64;
    let vis = Plane::from_fn(size, size, |x, y| {
        let stripes = 0.15 * (kx * x as f64 + ky * y as f64).sin();
        let checker = if ((x as f64 * tiles / s) as usize + (y as f64 * tiles / s) as usize).is_multiple_of(2) {
            0.08
        } else {
            -0.08
        };
        (background.at(x, y) + stripes + checker + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)
    });
    (ir, vis)
}

/// `n` in-memory pairs from a fixed seed.
pub fn toy_pairs(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (a, b) = toy_pair(size, &mut rng);
            SamplePair {
                lum_a: a,
                lum_b: b,
                chroma_a: None,
                chroma_b: None,
                path_a: PathBuf::from(format!("toy_{i:03}_ir.png")),
                path_b: PathBuf::from(format!("toy_{i:03}_vis.png")),
            }
        })
        .collect()
}

/// Constant, slightly warm chroma for the visible image.
fn tint(size: usize) -> Chroma {
    Chroma {
        cb: Plane::filled(size, size, 0.46),
        cr: Plane::filled(size, size, 0.55),
    }
}

/// Writes a toy dataset (grayscale infrared, RGB visible) and its manifest.
/// Returns the manifest path.
pub fn write_toy_dataset(dir: &Path, splits: &[(Split, usize)], size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    let total: usize = splits.iter().map(|(_, n)| n).sum();
    let pairs = toy_pairs(total, size, seed);
    let mut entries = Vec::with_capacity(total);
    let mut it = pairs.iter();
    for &(split, n) in splits {
        for pair in it.by_ref().take(n) {
            let path_a = dir.join(&pair.path_a);
            let path_b = dir.join(&pair.path_b);
            write_gray(&pair.lum_a, &path_a)?;
            write_fused(&pair.lum_b, Some(&tint(size)), &path_b)?;
            entries.push(ManifestEntry { path_a, path_b, split });
        }
    }
    let mut manifest = DatasetManifest {
        modality: Modality::Ivf,
        entries,
    };
    manifest.entries.sort();
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest.to_tsv(dir)).map_err(|e| FuseError::io(&path, e))?;
    Ok(path)
}
