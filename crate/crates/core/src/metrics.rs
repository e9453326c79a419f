//! Full-reference quality metrics on `[1, H, W, C]` tensors in `[0, 1]`.

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Standard per-scale exponents, finest scale first.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// PSNR cap used where a finite number is required.
pub const PSNR_CAP: f64 = 99.0;

/// Smallest side that supports `scales` dyadic scales.
pub fn msssim_min_size(scales: usize) -> usize {
    WINDOW << scales.saturating_sub(1)
}

/// Largest number of scales (at most 5) an image side supports.
pub fn max_scales(side: usize) -> usize {
    (1..=MSSSIM_WEIGHTS.len())
        .rev()
        .find(|&s| side >= msssim_min_size(s))
        .unwrap_or(0)
}

fn gaussian() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// One channel plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    /// Separable valid-mode Gaussian filter.
    fn filter(&self, g: &[f64; WINDOW]) -> Plane {
        let (w, h) = (self.w - WINDOW + 1, self.h - WINDOW + 1);
        let mut rows = vec![0.0; w * self.h];
        for y in 0..self.h {
            for x in 0..w {
                let src = &self.v[y * self.w + x..y * self.w + x + WINDOW];
                rows[y * w + x] = src.iter().zip(g).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = (0..WINDOW).map(|k| rows[(y + k) * w + x] * g[k]).sum();
            }
        }
        Plane { w, h, v: out }
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push((self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]) / 4.0);
            }
        }
        Plane { w, h, v }
    }
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, g: &[f64; WINDOW]) -> (f64, f64) {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_a = a.filter(g);
    let mu_b = b.filter(g);
    let aa = a.map2(a, |x, y| x * y).filter(g);
    let bb = b.map2(b, |x, y| x * y).filter(g);
    let ab = a.map2(b, |x, y| x * y).filter(g);
    let mut ssim = 0.0;
    let mut cs = 0.0;
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += c;
        ssim += l * c;
    }
    let n = mu_a.v.len() as f64;
    (ssim / n, cs / n)
}

fn planes(t: &Tensor<f64>) -> Vec<Plane> {
    let [_, h, w, c] = t.shape().0;
    (0..c)
        .map(|ch| Plane {
            w,
            h,
            v: t.data()[..h * w * c].iter().skip(ch).step_by(c).copied().collect(),
        })
        .collect()
}

/// MS-SSIM over `scales` scales (1 to 5), each channel independently, averaged.
/// With fewer than 5 scales the leading weights are renormalized to sum to 1.
pub fn msssim_with_scales(a: &Tensor<f64>, b: &Tensor<f64>, scales: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(config_err!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if scales == 0 || scales > MSSSIM_WEIGHTS.len() {
        return Err(config_err!("MS-SSIM supports 1 to 5 scales, got {scales}"));
    }
    let [_, h, w, _] = a.shape().0;
    let need = msssim_min_size(scales);
    if h.min(w) < need {
        return Err(config_err!(
            "{w}×{h} image is too small for {scales}-scale MS-SSIM (needs {need}×{need}); \
             use at most {} scales or a larger input",
            max_scales(h.min(w))
        ));
    }
    let weights = &MSSSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let g = gaussian();
    let pa = planes(a);
    let pb = planes(b);
    let mut acc = 0.0;
    for (mut x, mut y) in pa.into_iter().zip(pb) {
        let mut value = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&x, &y, &g);
            let term = if s + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(wt / total);
            if s + 1 < scales {
                x = x.downsample();
                y = y.downsample();
            }
        }
        acc += value;
    }
    Ok(acc / a.shape().depth() as f64)
}

/// Five-scale MS-SSIM.
pub fn msssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    msssim_with_scales(a, b, MSSSIM_WEIGHTS.len())
}

/// `10 log10(1 / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(config_err!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
