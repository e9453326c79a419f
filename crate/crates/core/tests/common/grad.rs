//! Randomized gradient-check trials, one function per operation family.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnic_core::cells::{Cell, CellKind, CellSpec, CellState, ConvGruState, ConvLstmState, AssocLstmState};
use rnic_core::codec::{Architecture, Binarization, Codec, Mode, RunOptions};
use rnic_core::nn::ParamStore;
use rnic_core::tensor::{CausalMask, MaskKind, Shape, Tape, Tensor};

use super::{gradcheck, random_tensor};

pub const CELLS: [CellKind; 4] = [
    CellKind::Lstm,
    CellKind::AssociativeLstm,
    CellKind::Gru,
    CellKind::ResidualGru,
];

pub const MODES: [Mode; 3] = [Mode::OneShot, Mode::Additive, Mode::ResidualScaled];

fn randomize<R: Rng>(store: &ParamStore<f64>, rng: &mut R) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .map(|t| random_tensor(t.shape(), 0.5, rng))
        .collect()
}

/// One recurrent step of a randomly shaped cell of `kind`.
pub fn cell_trial(kind: CellKind, rng: &mut ChaCha8Rng) -> f64 {
    let depth = 2 * rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let spec = CellSpec {
        kind,
        in_depth: rng.gen_range(1..=4),
        depth,
        input_kernel: (k, k),
        hidden_kernel: *[1, 3].choose(rng).unwrap(),
        stride: rng.gen_range(1..=2),
    };
    let mut store = ParamStore::new();
    let cell = Cell::new(&mut store, rng, "cell", spec).unwrap();
    let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=5));
    let (oh, ow) = cell.output_extent(h, w);
    let state_shape = Shape::new(b, oh, ow, depth);
    let n_params = store.len();
    let mut leaves = randomize(&store, rng);
    leaves.push(random_tensor(Shape::new(b, h, w, spec.in_depth), 1.0, rng));
    let n_state = if matches!(kind, CellKind::Gru | CellKind::ResidualGru) { 1 } else { 2 };
    for _ in 0..n_state {
        leaves.push(random_tensor(state_shape, 1.0, rng));
    }
    gradcheck(
        &leaves,
        |tape, values| {
            let mut s = store.clone();
            s.replace_all(values[..n_params].to_vec()).unwrap();
            let p = s.bind(tape);
            let mut vars = p.vars().to_vec();
            let x = tape.param(values[n_params].clone());
            let st: Vec<_> = values[n_params + 1..].iter().map(|t| tape.param(t.clone())).collect();
            vars.push(x);
            vars.extend(&st);
            let state = match kind {
                CellKind::Lstm => CellState::Lstm(ConvLstmState { c: st[0], h: st[1] }),
                CellKind::AssociativeLstm => CellState::Assoc(AssocLstmState { c: st[0], h: st[1] }),
                _ => CellState::Gru(ConvGruState { h: st[0] }),
            };
            let (out, next) = cell.step(tape, &p, x, &state).unwrap();
            let mut outs = vec![out];
            outs.extend(next.vars());
            (vars, outs)
        },
        rng,
    )
}

pub fn conv_trial(rng: &mut ChaCha8Rng) -> f64 {
    let (b, h, w, cin, cout) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let stride = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let leaves = vec![
        random_tensor(Shape::new(b, h, w, cin), 1.0, rng),
        random_tensor(Shape::kernel(kh, kw, cin, cout), 1.0, rng),
    ];
    gradcheck(
        &leaves,
        |tape, v| {
            let x = tape.param(v[0].clone());
            let k = tape.param(v[1].clone());
            let y = tape.conv2d(x, k, stride).unwrap();
            let y = tape.tanh(y);
            (vec![x, k], vec![y])
        },
        rng,
    )
}

pub fn masked_conv_trial(rng: &mut ChaCha8Rng) -> f64 {
    let kind = if rng.gen_bool(0.5) { MaskKind::Strict } else { MaskKind::Inclusive };
    let k = *[3, 5, 7].choose(rng).unwrap();
    let mask = CausalMask::full(kind, k, k).unwrap();
    let (b, h, w, cin, cout) = (1, rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let leaves = vec![
        random_tensor(Shape::new(b, h, w, cin), 1.0, rng),
        random_tensor(Shape::kernel(k, k, cin, cout), 1.0, rng),
    ];
    gradcheck(
        &leaves,
        |tape, v| {
            let x = tape.param(v[0].clone());
            let kv = tape.param(v[1].clone());
            let y = tape.masked_conv2d(x, kv, &mask).unwrap();
            let y = tape.tanh(y);
            (vec![x, kv], vec![y])
        },
        rng,
    )
}

pub fn depth_to_space_trial(rng: &mut ChaCha8Rng) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4), 4 * rng.gen_range(1..=3));
    let leaves = vec![random_tensor(shape, 1.0, rng)];
    gradcheck(
        &leaves,
        |tape, v| {
            let x = tape.param(v[0].clone());
            let y = tape.depth_to_space(x, 2).unwrap();
            let y = tape.sigmoid(y);
            (vec![x], vec![y])
        },
        rng,
    )
}

/// Two unrolled iterations of the desk codec with a relaxed binarizer, for a
/// random cell kind and reconstruction mode. Checks the gradient with respect
/// to every parameter and the input image at once.
pub fn codec_trial(rng: &mut ChaCha8Rng) -> f64 {
    let cell = *CELLS.choose(rng).unwrap();
    let mode = *MODES.choose(rng).unwrap();
    codec_trial_with(cell, mode, rng)
}

pub fn codec_trial_with(cell: CellKind, mode: Mode, rng: &mut ChaCha8Rng) -> f64 {
    let codec = Codec::<f64>::new(Architecture::desk(cell, mode), rng.gen()).unwrap();
    let store = codec.params().clone();
    let mut leaves: Vec<Tensor<f64>> = store
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        })
        .collect();
    let n_params = leaves.len();
    leaves.push(random_tensor(Shape::new(1, 32, 32, 3), 1.0, rng));
    let options = RunOptions {
        binarization: Binarization::Relaxed,
        fixed_gain: None,
    };
    gradcheck(
        &leaves,
        |tape: &mut Tape<f64>, values| {
            let mut s = store.clone();
            s.replace_all(values[..n_params].to_vec()).unwrap();
            let p = s.bind(tape);
            let x = tape.param(values[n_params].clone());
            let mut vars = p.vars().to_vec();
            vars.push(x);
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let its = codec.net().unroll(tape, &p, x, 2, &options, &mut unused).unwrap();
            let mut outs = Vec::new();
            for it in its {
                outs.push(it.reconstruction);
                outs.push(it.codes);
                outs.extend(it.gain);
            }
            (vars, outs)
        },
        rng,
    )
}
