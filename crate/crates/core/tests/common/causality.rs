//! Exhaustive single-flip causality checks of the probability model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rnic_core::codes::CodeTensor;
use rnic_core::entropy::EntropyModel;
use rnic_core::tensor::{Scalar, Tape};

use super::coding;

/// Per-iteration probabilities from the batched tape path.
fn tape_probabilities<T: Scalar>(model: &EntropyModel<T>, codes: &[CodeTensor]) -> Vec<Vec<T>> {
    let mut tape = Tape::<T>::new();
    let p = model.params().bind(&mut tape);
    let vars: Vec<_> = codes.iter().map(|c| tape.constant(c.to_signs())).collect();
    let logits = model.net().unroll(&mut tape, &p, &vars).unwrap();
    logits
        .into_iter()
        .map(|l| tape.value(l).data().iter().map(|&v| v.sigmoid()).collect())
        .collect()
}

/// For `grids` random `4×4×2` grids with `k` iterations, flips every bit
/// and checks that no probability raster-before the flip (same iteration) or
/// in an earlier iteration changes. Covers the coder's sequential evaluator
/// and the batched training path. Returns the number of flips checked and
/// how many of them changed some later probability.
pub fn exhaustive(grids: usize, k: usize, seed: u64) -> Result<(usize, usize), String> {
    let (h, w, d) = (4, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut sensitive = 0;
    for g in 0..grids {
        let m32 = coding::model(d, seed + g as u64, 5.0);
        let m64: EntropyModel<f64> = EntropyModel::from_named(
            *m32.arch(),
            m32.codec_hash(),
            m32.params()
                .names()
                .iter()
                .cloned()
                .zip(m32.params().tensors().iter().map(|t| t.convert()))
                .collect(),
        )
        .unwrap();
        let base = coding::random_codes(h, w, d, k, &mut rng);
        let seq0 = m32.probabilities(&base).unwrap();
        let tape0 = tape_probabilities(&m64, &base);
        for t in 0..k {
            for pos in 0..h * w {
                for di in 0..d {
                    let mut flipped = base.clone();
                    flipped[t].flip(pos / w, pos % w, di);
                    let seq = m32.probabilities(&flipped).unwrap();
                    let tp = tape_probabilities(&m64, &flipped);
                    for s in 0..k {
                        // Positions whose probabilities must not see the flip.
                        let guarded = if s < t {
                            h * w
                        } else if s == t {
                            pos + 1
                        } else {
                            0
                        };
                        for q in 0..guarded * d {
                            if seq[s][q].to_bits() != seq0[s][q].to_bits() {
                                return Err(format!(
                                    "sequential path: flip ({t},{pos},{di}) moved P at iteration {s}, index {q}"
                                ));
                            }
                            if tp[s][q].to_bits() != tape0[s][q].to_bits() {
                                return Err(format!(
                                    "tape path: flip ({t},{pos},{di}) moved P at iteration {s}, index {q}"
                                ));
                            }
                        }
                    }
                    let moved = (0..k).any(|s| seq[s] != seq0[s]);
                    sensitive += usize::from(moved);
                    checked += 1;
                }
            }
        }
    }
    Ok((checked, sensitive))
}
