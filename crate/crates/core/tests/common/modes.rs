//! Bit-exact equivalences between codec configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rnic_core::cells::CellKind;
use rnic_core::codec::{Architecture, Codec, IterationTrace, Mode, RunOptions};
use rnic_core::synthetic;
use rnic_core::tensor::{Tape, Tensor};

type Named = Vec<(String, Tensor<f32>)>;

pub fn named(codec: &Codec<f32>) -> Named {
    codec.params().names().iter().cloned().zip(codec.params().tensors().iter().cloned()).collect()
}

fn same_bits(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn same_trace(a: &IterationTrace<f32>, b: &IterationTrace<f32>) -> bool {
    same_bits(&a.codes, &b.codes) && same_bits(&a.reconstructions, &b.reconstructions) && same_bits(&a.residuals, &b.residuals)
}

/// Inference traces (portable kernels, deterministic binarizer) and one
/// stochastic training unroll (fast kernels, same binarizer seed) agree bit
/// for bit between the two codecs.
pub fn equivalent(a: &Codec<f32>, a_opts: RunOptions, b: &Codec<f32>, b_opts: RunOptions, seed: u64) -> Result<(), String> {
    let images = [synthetic::scene(32, 32, seed), synthetic::scene(64, 32, seed + 1)];
    for img in &images {
        let x = img.to_signed::<f32>();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let ta = a.run_iterations(&x, 6, &RunOptions { binarization: rnic_core::codec::Binarization::Deterministic, ..a_opts }, &mut r1).map_err(|e| e.to_string())?;
        let tb = b.run_iterations(&x, 6, &RunOptions { binarization: rnic_core::codec::Binarization::Deterministic, ..b_opts }, &mut r2).map_err(|e| e.to_string())?;
        if !same_trace(&ta, &tb) {
            return Err(format!("inference traces differ on a {}×{} image", img.width(), img.height()));
        }
        let unrolled = |c: &Codec<f32>, opts: RunOptions| -> Vec<Tensor<f32>> {
            let mut tape = Tape::new();
            let p = c.params().bind(&mut tape);
            let xv = tape.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let its = c.net().unroll(&mut tape, &p, xv, 4, &opts, &mut rng).unwrap();
            its.iter()
                .flat_map(|it| [it.codes, it.reconstruction, it.residual])
                .map(|v| tape.value(v).clone())
                .collect()
        };
        if !same_bits(&unrolled(a, a_opts), &unrolled(b, b_opts)) {
            return Err("stochastic training unrolls differ".into());
        }
    }
    Ok(())
}

/// ResidualScaled with every gain forced to 1 against Additive with the same
/// remaining weights.
pub fn scaled_unit_gain_is_additive(cell: CellKind, seed: u64) -> Result<(), String> {
    let scaled = Codec::<f32>::new(Architecture::desk(cell, Mode::ResidualScaled), seed).unwrap();
    let rest: Named = named(&scaled).into_iter().filter(|(n, _)| !n.starts_with("gain.")).collect();
    let additive = Codec::<f32>::from_named(Architecture::desk(cell, Mode::Additive), rest).map_err(|e| e.to_string())?;
    equivalent(&scaled, RunOptions::training().with_fixed_gain(1.0), &additive, RunOptions::training(), seed)
}

/// Residual GRU with both α-projections zeroed against a plain GRU.
pub fn zeroed_residual_gru_is_gru(mode: Mode, seed: u64) -> Result<(), String> {
    let mut rgru = Codec::<f32>::new(Architecture::desk(CellKind::ResidualGru, mode), seed).unwrap();
    let mut rest = Named::new();
    for (i, name) in rgru.params().names().to_vec().into_iter().enumerate() {
        if name.contains(".w_h.") || name.contains(".w_ox.") {
            rgru.params_mut().tensors_mut()[i].data_mut().fill(0.0);
        } else {
            rest.push((name, rgru.params().tensors()[i].clone()));
        }
    }
    let gru = Codec::<f32>::from_named(Architecture::desk(CellKind::Gru, mode), rest).map_err(|e| e.to_string())?;
    equivalent(&rgru, RunOptions::training(), &gru, RunOptions::training(), seed)
}
