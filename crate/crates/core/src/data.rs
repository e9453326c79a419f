//! Training data: 32×32 tiling, high-entropy tile selection, patch-set files
//! and PNG ingestion.

use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::DeflateEncoder;
use flate2::Compression;
use log::warn;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::{Scalar, Tensor};

pub const TILE: usize = 32;
/// Deflate level used for the compressibility score.
pub const HE_LEVEL: u32 = 9;
/// Tiles kept per image by the high-entropy sampler.
pub const HE_COUNT: usize = 100;

/// A 32×32 tile and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub pixels: RgbImage,
    pub source: String,
    pub x: usize,
    pub y: usize,
    /// Deflate size, when scored.
    pub score: Option<usize>,
}

/// Non-overlapping tiles in raster order; remainder pixels are dropped.
pub fn extract_tiles(image: &RgbImage, source: &str) -> Vec<Patch> {
    let (nx, ny) = (image.width() / TILE, image.height() / TILE);
    if nx == 0 || ny == 0 {
        warn!(
            "{source}: {}×{} image holds no complete {TILE}×{TILE} tile",
            image.width(),
            image.height()
        );
        return Vec::new();
    }
    let mut out = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            out.push(Patch {
                pixels: image.crop(tx * TILE, ty * TILE, TILE, TILE).expect("tile lies inside"),
                source: source.to_string(),
                x: tx * TILE,
                y: ty * TILE,
                score: None,
            });
        }
    }
    out
}

/// Deflate-compressed size of the raw RGB bytes. Larger means harder to compress.
pub fn he_score(tile: &RgbImage) -> usize {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(HE_LEVEL));
    enc.write_all(tile.data()).expect("writing to memory");
    enc.finish().expect("writing to memory").len()
}

/// The `count` least compressible tiles; ties keep raster order.
pub fn sample_high_entropy(image: &RgbImage, source: &str, count: usize) -> Vec<Patch> {
    let mut tiles = extract_tiles(image, source);
    if tiles.len() < count {
        warn!("{source}: only {} tiles available, {count} requested", tiles.len());
    }
    for t in &mut tiles {
        t.score = Some(he_score(&t.pixels));
    }
    // Stable sort: equal scores stay in raster order.
    tiles.sort_by_key(|t| std::cmp::Reverse(t.score));
    tiles.truncate(count);
    tiles
}

/// Stacks patches into a `[n, 32, 32, 3]` batch in `[-1, 1]`.
pub fn batch<T: Scalar>(patches: &[&Patch]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = patches.iter().map(|p| p.pixels.to_signed()).collect();
    Tensor::stack(&items)
}

const PATCH_MAGIC: &[u8; 8] = b"RNICPTCH";
const PATCH_VERSION: u8 = 1;

/// Serializes patches: magic, version, count, then per patch the source name,
/// tile coordinates, score and 3072 RGB bytes.
pub fn write_patch_set(patches: &[Patch]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PATCH_MAGIC);
    out.push(PATCH_VERSION);
    out.extend_from_slice(&(patches.len() as u32).to_le_bytes());
    for p in patches {
        out.extend_from_slice(&(p.source.len() as u16).to_le_bytes());
        out.extend_from_slice(p.source.as_bytes());
        out.extend_from_slice(&(p.x as u32).to_le_bytes());
        out.extend_from_slice(&(p.y as u32).to_le_bytes());
        let score = p.score.map_or(u32::MAX, |s| s as u32);
        out.extend_from_slice(&score.to_le_bytes());
        out.extend_from_slice(p.pixels.data());
    }
    out
}

pub fn read_patch_set(bytes: &[u8]) -> Result<Vec<Patch>> {
    let err = |m: &str| Error::Format(format!("patch set: {m}"));
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| err("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != PATCH_MAGIC {
        return Err(err("bad magic"));
    }
    if take(1)?[0] != PATCH_VERSION {
        return Err(err("unsupported version"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let count = u32_of(take(4)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let source = std::str::from_utf8(take(n)?)
            .map_err(|_| err("source name is not UTF-8"))?
            .to_string();
        let x = u32_of(take(4)?) as usize;
        let y = u32_of(take(4)?) as usize;
        let score = u32_of(take(4)?);
        let pixels = RgbImage::new(TILE, TILE, take(TILE * TILE * 3)?.to_vec())?;
        out.push(Patch {
            pixels,
            source,
            x,
            y,
            score: (score != u32::MAX).then_some(score as usize),
        });
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes"));
    }
    Ok(out)
}

/// Every `.png` below `dir`, sorted by path.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        let is_png = entry
            .path()
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if entry.file_type().is_file() && is_png {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Loads every PNG below `dir` with its path relative to `dir` as the id.
pub fn load_png_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    png_files(dir)?
        .into_iter()
        .map(|p| {
            let id = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
            Ok((id, RgbImage::read_png(&p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn tile_counts() {
        assert_eq!(extract_tiles(&synthetic::flat(1280, 720, [1, 2, 3]), "a").len(), 880);
        assert_eq!(extract_tiles(&synthetic::flat(32, 32, [0; 3]), "a").len(), 1);
        assert!(extract_tiles(&synthetic::flat(31, 64, [0; 3]), "a").is_empty());
        let t = extract_tiles(&synthetic::flat(100, 70, [0; 3]), "a");
        assert!(t.iter().all(|p| p.x % 32 == 0 && p.y % 32 == 0));
    }

    #[test]
    fn score_extremes() {
        assert!(he_score(&synthetic::flat(32, 32, [90, 10, 200])) < 100);
        let n = he_score(&synthetic::noise(32, 32, 1));
        assert!(n > 3000, "noise scored {n}");
    }

    #[test]
    fn identical_tiles_keep_raster_order() {
        let img = synthetic::flat(320, 384, [5; 3]);
        let picked = sample_high_entropy(&img, "f", 100);
        let all = extract_tiles(&img, "f");
        assert_eq!(picked.len(), 100);
        for (a, b) in picked.iter().zip(&all) {
            assert_eq!((a.x, a.y), (b.x, b.y));
        }
    }

    #[test]
    fn patch_set_round_trip() {
        let mut p = extract_tiles(&synthetic::scene(64, 32, 2), "scene");
        p[1].score = Some(77);
        let back = read_patch_set(&write_patch_set(&p)).unwrap();
        assert_eq!(back, p);
        assert!(read_patch_set(&write_patch_set(&p)[..20]).is_err());
    }
}
