//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rnic_core::data::{self, Patch};
use rnic_core::image::RgbImage;
use rnic_core::tensor::{Shape, Tape, Tensor, Var};

pub mod causality;
pub mod coding;
pub mod golden;
pub mod grad;
pub mod modes;
pub mod sampling;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Central finite-difference check of the directional derivative along a
/// random direction. `build` records a computation on the tape from the leaf
/// values and returns the leaf handles with the output; the output is reduced
/// to a scalar through a fixed random linear functional. Returns the relative
/// error.
pub fn gradcheck<R, F>(leaves: &[Tensor<f64>], build: F, rng: &mut R) -> f64
where
    R: Rng,
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Vec<Var>, Vec<Var>),
{
    let mut tape = Tape::new();
    let (vars, outs) = build(&mut tape, leaves);
    assert_eq!(vars.len(), leaves.len(), "one handle per leaf");
    let weights: Vec<Tensor<f64>> = outs
        .iter()
        .map(|&o| Tensor::uniform(tape.shape(o), 1.0, rng))
        .collect();
    let scalar = |tape: &mut Tape<f64>, outs: &[Var]| -> Var {
        let mut total = None;
        for (&o, w) in outs.iter().zip(&weights) {
            let m = tape.mul_const(o, w.clone()).expect("functional shape");
            let s = tape.sum(m);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).expect("scalar add"),
            });
        }
        total.expect("at least one output")
    };
    let loss = scalar(&mut tape, &outs);
    let grads = tape.backward(loss).expect("backward");
    let direction: Vec<Tensor<f64>> = leaves.iter().map(|l| Tensor::uniform(l.shape(), 1.0, rng)).collect();
    let analytic: f64 = vars
        .iter()
        .zip(&direction)
        .zip(leaves)
        .map(|((&v, d), l)| {
            let g = grads.get_or_zeros(v, l.shape());
            g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    let eval = |sign: f64| -> f64 {
        let moved: Vec<Tensor<f64>> = leaves
            .iter()
            .zip(&direction)
            .map(|(l, d)| {
                let data = l.data().iter().zip(d.data()).map(|(x, v)| x + sign * FD_STEP * v).collect();
                Tensor::from_vec(l.shape(), data).expect("same shape")
            })
            .collect();
        let mut t = Tape::new();
        let (_, outs) = build(&mut t, &moved);
        let s = scalar(&mut t, &outs);
        t.value(s).data()[0]
    };
    let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * FD_STEP);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn random_tensor<R: Rng>(shape: Shape, limit: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::uniform(shape, limit, rng)
}

/// Natural-image split: 500 training tiles spread evenly over every photo but
/// `chelsea`, and 50 held-out tiles spread evenly over `chelsea`.
pub struct NaturalSplit {
    pub train: Vec<Patch>,
    pub held_out: Vec<Patch>,
    pub train_images: Vec<RgbImage>,
    pub held_out_image: RgbImage,
}

fn spread(pool: &[Patch], n: usize) -> Vec<Patch> {
    assert!(pool.len() >= n, "{} tiles for {n} samples", pool.len());
    (0..n).map(|i| pool[i * pool.len() / n].clone()).collect()
}

pub fn natural_split() -> NaturalSplit {
    let images = data::load_png_dir(&fixtures().join("natural")).expect("natural fixtures");
    let mut pool = Vec::new();
    let mut train_images = Vec::new();
    let mut held = None;
    for (id, img) in images {
        if id.starts_with("chelsea") {
            held = Some(img);
        } else {
            pool.extend(data::extract_tiles(&img, &id));
            train_images.push(img);
        }
    }
    let held_out_image = held.expect("chelsea.png");
    let held_tiles = data::extract_tiles(&held_out_image, "chelsea.png");
    NaturalSplit {
        train: spread(&pool, 500),
        held_out: spread(&held_tiles, 50),
        train_images,
        held_out_image,
    }
}
