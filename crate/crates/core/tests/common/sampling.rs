//! Images mixing flat and noise tiles for the high-entropy sampler.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnic_core::data::{self, TILE};
use rnic_core::image::RgbImage;
use rnic_core::synthetic;

/// A `cols × rows` tile grid where each tile is uniform noise with
/// probability `p_noise` and a random flat colour otherwise. Returns the image
/// and the top-left corners of the noise tiles.
pub fn mixture<R: Rng>(cols: usize, rows: usize, p_noise: f64, rng: &mut R) -> (RgbImage, HashSet<(usize, usize)>) {
    let mut tiles = Vec::with_capacity(cols * rows);
    let mut noisy = HashSet::new();
    for ty in 0..rows {
        for tx in 0..cols {
            let tile = if rng.gen_bool(p_noise) {
                noisy.insert((tx * TILE, ty * TILE));
                synthetic::noise(TILE, TILE, rng.gen())
            } else {
                synthetic::flat(TILE, TILE, rng.gen())
            };
            tiles.push(tile);
        }
    }
    let img = RgbImage::from_fn(cols * TILE, rows * TILE, |x, y| {
        tiles[(y / TILE) * cols + x / TILE].pixel(x % TILE, y % TILE)
    });
    (img, noisy)
}

/// Runs `trials` random mixtures, sampling `count` tiles from each. Every
/// noise tile must be picked before any flat tile: the leading
/// `min(count, noise)` picks are noise, and the rest are flat. Returns the
/// number of noise tiles seen.
pub fn dominance_trials(trials: usize, count: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = 0;
    for trial in 0..trials {
        let cols = rng.gen_range(4..=16);
        let rows = rng.gen_range(4..=16);
        let (img, noisy) = mixture(cols, rows, rng.gen_range(0.05..0.95), &mut rng);
        seen += noisy.len();
        let picked = data::sample_high_entropy(&img, "mix", count);
        if picked.len() != count.min(cols * rows) {
            return Err(format!("trial {trial}: {} picks for {count}", picked.len()));
        }
        let lead = count.min(noisy.len());
        for (i, p) in picked.iter().enumerate() {
            if noisy.contains(&(p.x, p.y)) != (i < lead) {
                return Err(format!("trial {trial}: pick {i} at ({}, {}) breaks dominance", p.x, p.y));
            }
        }
    }
    Ok(seen)
}
