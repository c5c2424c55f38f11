#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use corrfuse::plane::Plane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth ramp plus uniform noise, clamped to `[0, 1]`.
pub fn textured_plane(size: usize, rng: &mut ChaCha8Rng) -> Plane {
    let (fx, fy, phase) = (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..6.0));
    let amp = rng.gen_range(0.05..0.3);
    Plane::from_fn(size, size, |x, y| {
        let s = (x as f64 * fx / size as f64 * 6.0 + y as f64 * fy / size as f64 * 6.0 + phase).sin();
        (0.5 + 0.3 * s + amp * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)
    })
}

/// Source pair plus a fused image built from both.
pub fn metric_triple(size: usize, seed: u64) -> (Plane, Plane, Plane) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = textured_plane(size, &mut rng);
    let b = textured_plane(size, &mut rng);
    let w: f64 = rng.gen_range(0.2..0.8);
    let f = Plane::from_fn(size, size, |x, y| {
        (w * a.at(x, y) + (1.0 - w) * b.at(x, y) + 0.05 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)
    });
    (f, a, b)
}
