//! Rate-distortion evaluation of a codec over an image set.

use std::thread;

use crate::bitstream::EntropyRef;
use crate::codec::Codec;
use crate::container::ModelHash;
use crate::entropy::encode_codes;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::metrics::{self, max_scales};
use crate::rd::{mean_std, Metric, RdRow};

/// Rate and quality of one image after one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationResult {
    pub iteration: usize,
    /// Raw code bits of iterations `1..=iteration`.
    pub raw_bits: usize,
    /// Entropy-coded bits of iterations `1..=iteration`.
    pub coded_bits: Option<usize>,
    pub msssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub iterations: Vec<IterationResult>,
}

impl ImageResult {
    fn pixels(&self) -> f64 {
        (self.width * self.height) as f64
    }
}

/// Encodes and decodes `image` for `k` iterations and scores every prefix.
/// MS-SSIM uses as many scales (up to five) as the image size allows.
pub fn evaluate_image(
    image: &RgbImage,
    codec: &Codec<f32>,
    codec_hash: &ModelHash,
    entropy: Option<EntropyRef<'_>>,
    k: usize,
) -> Result<Vec<IterationResult>> {
    let scales = max_scales(image.width().min(image.height())).min(5);
    if scales == 0 {
        return Err(Error::Image(format!(
            "{}×{} is below the {}-pixel minimum for MS-SSIM",
            image.width(),
            image.height(),
            metrics::msssim_min_size(1)
        )));
    }
    let padded = image.pad_to_multiple(codec.arch().mode.alignment());
    let codes = codec.encode_image(&padded.to_signed(), k)?;
    let coded: Option<Vec<usize>> = entropy
        .map(|e| encode_codes(e.model, codec_hash, &codes))
        .transpose()?
        .map(|segs| segs.iter().map(|s| 8 * s.len()).collect());
    let reference = image.to_unit();
    let per_iteration = codec.arch().bits_per_iteration(padded.height(), padded.width());
    let mut out = Vec::with_capacity(k);
    let mut coded_total = 0;
    for (t, recon) in codec.decode_codes(&codes)?.iter().enumerate() {
        let decoded = RgbImage::from_signed(recon)?.crop(0, 0, image.width(), image.height())?;
        let decoded = decoded.to_unit();
        coded_total += coded.as_ref().map_or(0, |c| c[t]);
        out.push(IterationResult {
            iteration: t + 1,
            raw_bits: (t + 1) * per_iteration,
            coded_bits: coded.as_ref().map(|_| coded_total),
            msssim: metrics::msssim_with_scales(&reference, &decoded, scales)?,
            psnr: metrics::psnr(&reference, &decoded)?,
        });
    }
    Ok(out)
}

/// Evaluates every image, fanning out across the available cores. Results
/// keep the input order.
pub fn evaluate(
    images: &[(String, RgbImage)],
    codec: &Codec<f32>,
    codec_hash: &ModelHash,
    entropy: Option<EntropyRef<'_>>,
    k: usize,
) -> Result<Vec<ImageResult>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(images.len().max(1));
    let chunk = images.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<ImageResult>>> = thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(name, img)| {
                            Ok(ImageResult {
                                name: name.clone(),
                                width: img.width(),
                                height: img.height(),
                                iterations: evaluate_image(img, codec, codec_hash, entropy, k)?,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Aggregates per-image results into one row per iteration and metric.
/// Rates are averaged per image, each relative to its own pixel count.
pub fn rd_rows(model_id: &str, results: &[ImageResult]) -> Vec<RdRow> {
    let k = results.iter().map(|r| r.iterations.len()).min().unwrap_or(0);
    let n = results.len();
    let mut rows = Vec::with_capacity(2 * k);
    for t in 0..k {
        let at = |r: &ImageResult| r.iterations[t];
        let bpp_raw = results.iter().map(|r| at(r).raw_bits as f64 / r.pixels()).sum::<f64>() / n as f64;
        let bpp_coded = results
            .iter()
            .map(|r| at(r).coded_bits.map(|b| b as f64 / r.pixels()))
            .sum::<Option<f64>>()
            .map(|s| s / n as f64);
        for metric in [Metric::Msssim, Metric::Psnr] {
            let values: Vec<f64> = results
                .iter()
                .map(|r| match metric {
                    Metric::Msssim => at(r).msssim,
                    Metric::Psnr => at(r).psnr,
                })
                .collect();
            let (quality_mean, quality_std) = mean_std(&values);
            rows.push(RdRow {
                model_id: model_id.to_string(),
                metric,
                iteration: t + 1,
                bpp_raw,
                bpp_coded,
                quality_mean,
                quality_std,
                n_images: n,
            });
        }
    }
    rows
}
