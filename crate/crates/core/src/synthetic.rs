//! Procedural test images: smooth shading, soft-edged shapes and mild grain.
//! Not a substitute for photographs, but spatially correlated enough to
//! exercise the codec and the entropy model deterministically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::RgbImage;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    colour: [f64; 3],
}

/// A `width × height` image fully determined by `seed`.
pub fn scene(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(40.0..200.0));
    let grad: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-60.0..60.0));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let blobs: Vec<Blob> = (0..rng.gen_range(3..9))
        .map(|_| Blob {
            cx: rng.gen_range(0.0..width as f64),
            cy: rng.gen_range(0.0..height as f64),
            rx: rng.gen_range(4.0..(width as f64 / 2.0).max(5.0)),
            ry: rng.gen_range(4.0..(height as f64 / 2.0).max(5.0)),
            colour: std::array::from_fn(|_| rng.gen_range(0.0..255.0)),
        })
        .collect();
    let freq = rng.gen_range(0.05..0.4);
    let stripe: f64 = rng.gen_range(0.0..25.0);
    let norm = width.max(height) as f64;
    let mut grain = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let t = (fx * ca + fy * sa) / norm;
        let mut px: [f64; 3] = std::array::from_fn(|c| base[c] + grad[c] * t);
        for b in &blobs {
            let d = ((fx - b.cx) / b.rx).powi(2) + ((fy - b.cy) / b.ry).powi(2);
            // Soft edge over roughly two pixels.
            let a = 1.0 / (1.0 + ((d - 1.0) * b.rx.min(b.ry)).exp());
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + b.colour[c] * a;
            }
        }
        let s = stripe * (freq * (fx * sa - fy * ca)).sin();
        let n: f64 = grain.gen_range(-4.0..4.0);
        px.map(|v| (v + s + n).round().clamp(0.0, 255.0) as u8)
    })
}

/// Independent uniform pixels.
pub fn noise(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(width, height, |_, _| rng.gen())
}

/// A single colour.
pub fn flat(width: usize, height: usize, colour: [u8; 3]) -> RgbImage {
    RgbImage::from_fn(width, height, |_, _| colour)
}
