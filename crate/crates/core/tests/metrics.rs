mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnic_core::image::RgbImage;
use rnic_core::metrics::{msssim, msssim_with_scales, psnr};
use rnic_core::rd::{auc, RdPoint};
use rnic_core::tensor::{Shape, Tensor};

fn crop(name: &str, x: usize, y: usize, side: usize) -> Tensor<f64> {
    RgbImage::read_png(&common::fixtures().join("natural").join(name))
        .unwrap()
        .crop(x, y, side, side)
        .unwrap()
        .to_unit()
}

// Reference values from a float64 SciPy implementation (same-channel SSIM,
// 11×11 Gaussian window with σ = 1.5, 2×2 average downsampling, standard
// weights; the two-scale value renormalizes the leading weights).
const SCIPY_SHIFTED_5: f64 = 0.873_527_538_857_577_4;
const SCIPY_OTHER_5: f64 = 0.112_507_413_047_779_93;
const SCIPY_PATCH_2: f64 = 0.965_647_070_682_843_3;

// `tf.image.ssim_multiscale` on the same crops. It computes in float32, which
// accounts for differences of up to 2.5e-5.
const TF_SHIFTED_5: f64 = 0.873_514_413_833_618_2;
const TF_OTHER_5: f64 = 0.112_482_368_946_075_44;
const TF_PATCH_2: f64 = 0.965_649_306_774_139_4;

#[test]
fn msssim_matches_independent_implementations() {
    let a = crop("astronaut.png", 100, 100, 192);
    let shifted = msssim(&a, &crop("astronaut.png", 102, 101, 192)).unwrap();
    let other = msssim(&a, &crop("coffee.png", 200, 150, 192)).unwrap();
    let patch = msssim_with_scales(&crop("astronaut.png", 64, 64, 32), &crop("astronaut.png", 65, 64, 32), 2).unwrap();
    for (ours, scipy, tf) in [
        (shifted, SCIPY_SHIFTED_5, TF_SHIFTED_5),
        (other, SCIPY_OTHER_5, TF_OTHER_5),
        (patch, SCIPY_PATCH_2, TF_PATCH_2),
    ] {
        assert!((ours - scipy).abs() < 1e-9, "{ours} vs {scipy}");
        assert!((ours - tf).abs() < 5e-5, "{ours} vs {tf}");
    }
}

#[test]
fn msssim_identity_symmetry_and_inversion() {
    let a = crop("chelsea.png", 0, 0, 200);
    let b = crop("chelsea.png", 3, 5, 200);
    assert!((msssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    assert_eq!(msssim(&a, &b).unwrap().to_bits(), msssim(&b, &a).unwrap().to_bits());
    let inv = a.map(|v| 1.0 - v);
    assert!(msssim(&a, &inv).unwrap() < 0.1);
}

#[test]
fn msssim_degrades_with_noise() {
    let a = crop("rocket.png", 100, 50, 176);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut noisy = |sigma: f64| {
        let n = a.map(|v| v);
        let data = n.data().iter().map(|v| v + sigma * (rng.gen::<f64>() - 0.5) * 12f64.sqrt()).collect();
        Tensor::from_vec(a.shape(), data).unwrap()
    };
    let (small, large) = (noisy(0.01), noisy(0.1));
    assert!(msssim(&a, &large).unwrap() < msssim(&a, &small).unwrap());
}

#[test]
fn msssim_refuses_small_inputs() {
    let a = Tensor::<f64>::full(Shape::hwc(100, 100, 3), 0.5);
    assert!(msssim(&a, &a).is_err());
    assert!(msssim_with_scales(&a, &a, 4).is_ok());
}

#[test]
fn psnr_of_one_level_offset() {
    let a = crop("coffee.png", 0, 0, 64).map(|v| v.min(254.0 / 255.0));
    let b = a.map(|v| v + 1.0 / 255.0);
    // 20·log10(255)
    assert!((psnr(&a, &b).unwrap() - 48.13).abs() < 0.01);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn auc_of_constant_and_unit_curves() {
    let constant: Vec<RdPoint> = (1..=16)
        .map(|t| RdPoint {
            bpp: t as f64 / 8.0,
            quality: 1.8,
        })
        .collect();
    assert!((auc(&constant, 2.0).unwrap() - 1.8 * 1.875).abs() <= 1e-9);
    let unit = [RdPoint { bpp: 1.0, quality: 1.0 }, RdPoint { bpp: 2.0, quality: 1.0 }];
    assert!((auc(&unit, 2.0).unwrap() - 1.0).abs() <= 1e-12);
    let mut near_zero = vec![RdPoint { bpp: 1e-12, quality: 1.8 }];
    near_zero.extend(constant);
    assert!((auc(&near_zero, 2.0).unwrap() - 3.6).abs() < 1e-9);
    assert!(auc(&[RdPoint { bpp: 2.5, quality: 1.0 }, RdPoint { bpp: 3.0, quality: 1.0 }], 2.0).is_err());
}
