//! Finite-difference gradient checks at 64-bit precision. The acceptance
//! runner repeats these with more trials.

mod common;

use common::grad::{self, CELLS, MODES};
use common::FD_TOLERANCE;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_trials(name: &str, trials: usize, seed: u64, mut trial: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..trials {
        let err = trial(&mut rng);
        assert!(err < FD_TOLERANCE, "{name} trial {i}: relative error {err:e}");
    }
}

#[test]
fn recurrent_cells() {
    for (i, kind) in CELLS.into_iter().enumerate() {
        assert_trials(kind.short_name(), 10, 100 + i as u64, |r| grad::cell_trial(kind, r));
    }
}

#[test]
fn convolutions() {
    assert_trials("conv2d", 10, 1, grad::conv_trial);
    assert_trials("masked_conv2d", 10, 2, grad::masked_conv_trial);
    assert_trials("depth_to_space", 10, 3, grad::depth_to_space_trial);
}

#[test]
fn unrolled_desk_codec_every_cell_and_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for cell in CELLS {
        for mode in MODES {
            let err = grad::codec_trial_with(cell, mode, &mut rng);
            assert!(err < FD_TOLERANCE, "{cell:?}/{mode:?}: relative error {err:e}");
        }
    }
}

#[test]
fn checker_detects_a_missing_gradient() {
    use rnic_core::tensor::Shape;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = vec![common::random_tensor(Shape::new(1, 3, 3, 2), 1.0, &mut rng)];
    // The second path reads the leaf value as a constant, so backward misses it.
    let err = common::gradcheck(
        &leaves,
        |tape, v| {
            let x = tape.param(v[0].clone());
            let c = tape.constant(v[0].clone());
            let y = tape.mul(x, c).unwrap();
            (vec![x], vec![y])
        },
        &mut rng,
    );
    assert!(err > 0.1, "relative error {err}");
}
