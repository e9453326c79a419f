use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnic_core::codes::CodeTensor;
use rnic_core::entropy::eval::compute_z1;
use rnic_core::entropy::{EntropyArchitecture, EntropyModel};
use rnic_core::tensor::{Tape, Tensor};
use rnic_core::Error;

fn random_codes(h: usize, w: usize, k: usize, seed: u64) -> Vec<CodeTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=k)
        .map(|t| {
            let bits = (0..h * w * 32).map(|_| rng.gen_range(0..2u8)).collect();
            CodeTensor::new(h, w, 32, t, bits).unwrap()
        })
        .collect()
}

/// Random weights with a larger spread than the initializer, so that every
/// stage of the model visibly moves the probabilities.
fn model(seed: u64) -> EntropyModel<f64> {
    let mut m = EntropyModel::<f64>::new(EntropyArchitecture { code_depth: 32, features: 8 }, [0; 16], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.params_mut().tensors_mut() {
        *t = Tensor::uniform(t.shape(), 0.3, &mut rng);
    }
    m
}

#[test]
fn position_evaluator_matches_batched_tape() {
    let m = model(1);
    let codes = random_codes(5, 6, 3, 2);
    let incremental = m.probabilities(&codes).unwrap();
    let mut tape = Tape::<f64>::inference();
    let p = m.params().bind(&mut tape);
    let vars: Vec<_> = codes.iter().map(|c| tape.constant(c.to_signs())).collect();
    let logits = m.net().unroll(&mut tape, &p, &vars).unwrap();
    for (l, inc) in logits.iter().zip(&incremental) {
        let batched: Vec<f64> = tape.value(*l).data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        assert_eq!(batched.len(), inc.len());
        for (a, b) in batched.iter().zip(inc) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn z1_needs_history() {
    let m = model(1);
    assert!(matches!(compute_z1(&m, &[]), Err(Error::Usage(_))));
    let codes = random_codes(3, 3, 2, 4);
    let z = compute_z1(&m, &codes[..1]).unwrap();
    assert_eq!(z.shape().depth(), 8);
}

#[test]
fn z1_depends_on_previous_codes() {
    let m = model(2);
    let codes = random_codes(4, 4, 2, 5);
    let mut other = codes.clone();
    other[1].flip(2, 2, 3);
    let a = compute_z1(&m, &codes).unwrap();
    let b = compute_z1(&m, &other).unwrap();
    assert_ne!(a, b);
    let pa = m.probabilities(&random_codes(4, 4, 3, 9)).unwrap();
    let mut flipped = random_codes(4, 4, 3, 9);
    flipped[0].flip(3, 3, 0);
    let pb = m.probabilities(&flipped).unwrap();
    assert_eq!(pa[0], pb[0]);
    assert_ne!(pa[1], pb[1]);
}
