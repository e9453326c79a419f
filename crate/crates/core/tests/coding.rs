mod common;

use common::coding;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnic_core::entropy::{decode_codes, encode_codes};
use rnic_core::Error;

#[test]
fn range_coder_is_lossless_and_near_ideal() {
    let stats = coding::range_coder_trials(300, 7).unwrap();
    assert!(stats.worst_excess_bits <= 40.0, "{}", stats.worst_excess_bits);
}

#[test]
fn uniform_bits_cost_their_length() {
    for n in [10_000, 100_000] {
        let overhead = coding::uniform_overhead(n, n as u64);
        assert!(overhead.abs() <= 0.005, "n = {n}: {overhead}");
    }
}

#[test]
fn model_coder_round_trips_with_prefixes() {
    coding::model_coder_trials(150, 3).unwrap();
}

#[test]
fn every_cut_inside_a_segment_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = coding::model(3, 1, 20.0);
    let hash = m.codec_hash();
    let codes = coding::random_codes(3, 4, 3, 2, &mut rng);
    let segments = encode_codes(&m, &hash, &codes).unwrap();
    for cut in 0..segments[1].len() {
        let cut_segments = vec![segments[0].clone(), segments[1][..cut].to_vec()];
        match decode_codes(&m, &hash, &cut_segments, 3, 4) {
            Err(Error::Decode(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut long = segments.clone();
    long[0].push(0);
    assert!(matches!(decode_codes(&m, &hash, &long, 3, 4), Err(Error::Decode(_))));
}

#[test]
fn model_bound_to_another_codec_is_refused() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = coding::model(2, 1, 1.0);
    let codes = coding::random_codes(2, 2, 2, 1, &mut rng);
    assert!(matches!(encode_codes(&m, &[0xAB; 16], &codes), Err(Error::ModelMismatch(_))));
}
