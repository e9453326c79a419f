//! Losslessness and size checks for the range coder and the model coder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnic_core::codes::CodeTensor;
use rnic_core::entropy::arith::{decode_bits, encode_bits};
use rnic_core::entropy::{decode_codes, encode_codes, EntropyArchitecture, EntropyModel};

/// Probability sequences of increasing hostility.
pub fn probability_sequence(kind: usize, n: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<f64>) {
    let probs: Vec<f64> = (0..n)
        .map(|i| match kind % 6 {
            0 => rng.gen::<f64>(),
            1 => 0.5,
            2 => if rng.gen_bool(0.5) { 1e-12 } else { 1.0 - 1e-12 },
            3 => if i % 2 == 0 { 0.0 } else { 1.0 },
            4 => rng.gen_range(0.0..1e-3),
            _ => 1.0 - rng.gen_range(0.0..1e-3),
        })
        .collect();
    let bits = probs
        .iter()
        .map(|&p| match kind % 3 {
            // Every bit the model considers most unlikely.
            0 if kind >= 6 => u8::from(p < 0.5),
            _ => u8::from(rng.gen::<f64>() < p),
        })
        .collect();
    (bits, probs)
}

/// Ideal code length in bits under the unquantized probabilities.
pub fn ideal_bits(bits: &[u8], probs: &[f64]) -> f64 {
    bits.iter()
        .zip(probs)
        .map(|(&b, &p)| {
            let p = if b == 1 { p } else { 1.0 - p };
            -p.max(f64::MIN_POSITIVE).log2()
        })
        .sum()
}

/// Quantized-probability ideal, the best any 16-bit coder can do.
pub fn quantized_ideal_bits(bits: &[u8], probs: &[f64]) -> f64 {
    use rnic_core::entropy::arith::{quantize, quantized_cost};
    bits.iter().zip(probs).map(|(&b, &p)| quantized_cost(b, quantize(p))).sum()
}

pub struct CoderStats {
    pub trials: usize,
    pub worst_excess_bits: f64,
}

/// Round-trips `trials` sequences; checks identity and the size bound
/// `len ≤ ideal + 32 + 1%` against both the exact and the quantized
/// cross-entropy. Reports the worst excess over the exact one.
pub fn range_coder_trials(trials: usize, seed: u64) -> Result<CoderStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for t in 0..trials {
        let n = rng.gen_range(0..4000);
        let (bits, probs) = probability_sequence(t % 12, n, &mut rng);
        let coded = encode_bits(&bits, &probs).map_err(|e| e.to_string())?;
        let back = decode_bits(&coded, &probs).map_err(|e| format!("trial {t}: {e}"))?;
        if back != bits {
            return Err(format!("trial {t} (kind {}): decoded bits differ", t % 12));
        }
        let len = 8.0 * coded.len() as f64;
        let exact = ideal_bits(&bits, &probs);
        let quantized = quantized_ideal_bits(&bits, &probs);
        for ideal in [exact, quantized] {
            if len > ideal * 1.01 + 32.0 {
                return Err(format!("trial {t} (kind {}): {len} bits for an ideal of {ideal:.1}", t % 12));
            }
        }
        worst = worst.max(len - exact);
    }
    Ok(CoderStats {
        trials,
        worst_excess_bits: worst,
    })
}

/// Coded length relative to the input at `p = 0.5` for `n` random bits.
pub fn uniform_overhead(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    let coded = encode_bits(&bits, &vec![0.5; n]).unwrap();
    (8 * coded.len()) as f64 / n as f64 - 1.0
}

/// An untrained model whose output layer is scaled to produce confident
/// (and for random codes mostly wrong) probabilities.
pub fn model(code_depth: usize, seed: u64, sharpen: f32) -> EntropyModel<f32> {
    let arch = EntropyArchitecture {
        code_depth,
        features: 8,
    };
    let mut m = EntropyModel::<f32>::new(arch, [seed as u8; 16], seed).unwrap();
    let id = m.params().by_name("entropy.head2.weight").unwrap();
    for v in m.params_mut().get_mut(id).data_mut() {
        *v *= sharpen;
    }
    m
}

pub fn random_codes(h: usize, w: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<CodeTensor> {
    let p: f64 = rng.gen_range(0.05..0.95);
    (1..=k)
        .map(|t| {
            let bits = (0..h * w * d).map(|_| u8::from(rng.gen_bool(p))).collect();
            CodeTensor::new(h, w, d, t, bits).unwrap()
        })
        .collect()
}

/// Model-driven round trips of random code tensors, including every
/// iteration-boundary prefix of the segment list. Every segment must also
/// respect the size bound against the model's own cross-entropy.
pub fn model_coder_trials(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model(4, seed, 1.0);
    for t in 0..trials {
        if t % 50 == 0 {
            let sharpen = [1.0, 20.0, 200.0][(t / 50) % 3];
            m = model(rng.gen_range(1..=6), t as u64, sharpen);
        }
        let hash = m.codec_hash();
        let d = m.arch().code_depth;
        let (h, w, k) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=3));
        let codes = random_codes(h, w, d, k, &mut rng);
        let segments = encode_codes(&m, &hash, &codes).map_err(|e| e.to_string())?;
        let probs = m.probabilities(&codes).map_err(|e| e.to_string())?;
        for ((seg, c), p) in segments.iter().zip(&codes).zip(&probs) {
            let ideal = ideal_bits(c.bits(), p);
            if 8.0 * seg.len() as f64 > ideal * 1.01 + 32.0 {
                return Err(format!("trial {t}: {}-byte segment for an ideal of {ideal:.1} bits", seg.len()));
            }
        }
        for j in 0..=k {
            let back = decode_codes(&m, &hash, &segments[..j], h, w).map_err(|e| format!("trial {t}: {e}"))?;
            if back[..] != codes[..j] {
                return Err(format!("trial {t}: prefix of {j} iterations decoded differently"));
            }
        }
    }
    Ok(trials)
}
