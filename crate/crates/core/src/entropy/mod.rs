//! Learned lossless coding of binary codes.
//!
//! The probability model has three stages per iteration: a strictly causal
//! masked 7×7 convolution over the codes (`z0`), a line LSTM that walks the
//! code grid one row at a time, and two 1×1 convolutions ending in a sigmoid.
//! From the second iteration on, a context `z1` computed from the previous
//! iteration's codes is concatenated to `z0` before the line LSTM.
//!
//! Training evaluates the model on a recording tape over whole code grids
//! ([`EntropyNet::logits`]). Coding uses [`eval::PositionEvaluator`], which
//! computes the same function one position at a time in a fixed arithmetic
//! order, so encoder and decoder always see identical probabilities.

pub mod arith;
pub mod coder;
pub mod eval;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{lstm_update, Cell, CellKind, CellSpec, CellState, ConvLstmState};
use crate::codes::{CodeTensor, CODE_DEPTH};
use crate::error::{config_err, Error, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, ParamStore};
use crate::tensor::{CausalMask, MaskKind, Scalar, Shape, Tape, Tensor, Var};

pub use coder::{decode_codes, encode_codes};

/// Side of the masked context convolution.
pub const CONTEXT_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntropyArchitecture {
    pub code_depth: usize,
    /// Feature depth of `z0`, `z1` and the line LSTM state.
    pub features: usize,
}

impl EntropyArchitecture {
    pub fn paper() -> Self {
        EntropyArchitecture {
            code_depth: CODE_DEPTH,
            features: 64,
        }
    }

    pub fn desk() -> Self {
        EntropyArchitecture {
            code_depth: CODE_DEPTH,
            features: 32,
        }
    }
}

/// Layer structure of the probability model.
#[derive(Debug, Clone)]
pub struct EntropyNet {
    arch: EntropyArchitecture,
    pub(crate) context: Conv2d,
    pub(crate) context_mask: CausalMask,
    pub(crate) line_input: Conv2d,
    pub(crate) line_input_mask: CausalMask,
    pub(crate) line_state: Conv2d,
    pub(crate) head1: Conv2d,
    pub(crate) head2: Conv2d,
    z1_conv1: Conv2d,
    z1_conv2: Conv2d,
    z1_lstm: Cell,
    z1_conv3: Conv2d,
    z1_conv4: Conv2d,
}

impl EntropyNet {
    pub fn new<T: Scalar, R: Rng>(
        arch: EntropyArchitecture,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, f) = (arch.code_depth, arch.features);
        if c == 0 || f == 0 {
            return Err(config_err!("degenerate entropy model {arch:?}"));
        }
        let k = CONTEXT_KERNEL;
        Ok(EntropyNet {
            arch,
            context: Conv2d::new(store, rng, "entropy.context", ConvSpec::new(k, c, f)),
            context_mask: CausalMask::full(MaskKind::Strict, k, k)?,
            line_input: Conv2d::new(store, rng, "entropy.line.w", ConvSpec::rect(1, 3, 2 * f, 4 * f)),
            line_input_mask: CausalMask::full(MaskKind::Inclusive, 1, 3)?,
            line_state: Conv2d::new(
                store,
                rng,
                "entropy.line.u",
                ConvSpec::rect(1, 3, f, 4 * f).no_bias(),
            ),
            head1: Conv2d::new(store, rng, "entropy.head1", ConvSpec::new(1, f, f)),
            head2: Conv2d::new(store, rng, "entropy.head2", ConvSpec::new(1, f, c)),
            z1_conv1: Conv2d::new(store, rng, "entropy.z1.conv1", ConvSpec::new(3, c, f)),
            z1_conv2: Conv2d::new(store, rng, "entropy.z1.conv2", ConvSpec::new(3, f, f)),
            z1_lstm: Cell::new(
                store,
                rng,
                "entropy.z1.lstm",
                CellSpec {
                    kind: CellKind::Lstm,
                    in_depth: f,
                    depth: f,
                    input_kernel: (1, 1),
                    hidden_kernel: 1,
                    stride: 1,
                },
            )?,
            z1_conv3: Conv2d::new(store, rng, "entropy.z1.conv3", ConvSpec::new(1, f, f)),
            z1_conv4: Conv2d::new(store, rng, "entropy.z1.conv4", ConvSpec::new(1, f, f)),
        })
    }

    pub fn arch(&self) -> &EntropyArchitecture {
        &self.arch
    }

    fn check_codes<T: Scalar>(&self, tape: &Tape<T>, codes: Var) -> Result<()> {
        let d = tape.shape(codes).depth();
        if d != self.arch.code_depth {
            return Err(config_err!(
                "entropy model expects {} code planes, got {d}",
                self.arch.code_depth
            ));
        }
        Ok(())
    }

    /// Zero state of the cross-iteration LSTM inside the `z1` network.
    pub fn zero_z1_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize, height: usize, width: usize) -> CellState {
        self.z1_lstm.zero_state(tape, batch, height, width)
    }

    /// Progressive context from the previous iteration's `±1` codes; advances
    /// the cross-iteration LSTM by one step.
    pub fn z1<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        prev_codes: Var,
        state: &CellState,
    ) -> Result<(Var, CellState)> {
        self.check_codes(tape, prev_codes)?;
        let a = self.z1_conv1.forward(tape, p, prev_codes)?;
        let a = tape.elu(a);
        let a = self.z1_conv2.forward(tape, p, a)?;
        let a = tape.elu(a);
        let (a, next) = self.z1_lstm.step(tape, p, a, state)?;
        let a = self.z1_conv3.forward(tape, p, a)?;
        let a = tape.elu(a);
        let z1 = self.z1_conv4.forward(tape, p, a)?;
        Ok((z1, next))
    }

    /// Bit logits of one iteration given its `±1` codes and context `z1`.
    /// Position `(y, x)` depends only on codes at raster-earlier positions.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, codes: Var, z1: Var) -> Result<Var> {
        self.check_codes(tape, codes)?;
        let f = self.arch.features;
        let [b, h, w, _] = tape.shape(codes).0;
        if tape.shape(z1) != Shape::new(b, h, w, f) {
            return Err(config_err!(
                "z1 {:?} does not match codes {:?}",
                tape.shape(z1),
                tape.shape(codes)
            ));
        }
        let z0 = self.context.forward_masked(tape, p, codes, &self.context_mask)?;
        let joined = tape.concat_depth(&[z0, z1])?;
        let input = self
            .line_input
            .forward_masked(tape, p, joined, &self.line_input_mask)?;
        let zero = Tensor::zeros(Shape::new(b, 1, w, f));
        let mut state = ConvLstmState {
            c: tape.constant(zero.clone()),
            h: tape.constant(zero),
        };
        let mut rows = Vec::with_capacity(h);
        for y in 0..h {
            let inp = tape.slice_rows(input, y, 1)?;
            let rec = self.line_state.forward(tape, p, state.h)?;
            let pre = tape.add(inp, rec)?;
            state = lstm_update(tape, pre, state.c, f)?;
            rows.push(state.h);
        }
        let lines = tape.concat_rows(&rows)?;
        let e = self.head1.forward(tape, p, lines)?;
        let e = tape.elu(e);
        self.head2.forward(tape, p, e)
    }

    /// Logits of every iteration; `codes[t]` is the batch of `±1` codes of
    /// iteration `t + 1`.
    pub fn unroll<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, codes: &[Var]) -> Result<Vec<Var>> {
        let first = *codes
            .first()
            .ok_or_else(|| Error::Usage("no code iterations".into()))?;
        let [b, h, w, _] = tape.shape(first).0;
        let zero = tape.constant(Tensor::zeros(Shape::new(b, h, w, self.arch.features)));
        let mut state = self.zero_z1_state(tape, b, h, w);
        let mut out = Vec::with_capacity(codes.len());
        for (t, &c) in codes.iter().enumerate() {
            let z1 = if t == 0 {
                zero
            } else {
                let (z1, next) = self.z1(tape, p, codes[t - 1], &state)?;
                state = next;
                z1
            };
            out.push(self.logits(tape, p, c, z1)?);
        }
        Ok(out)
    }

    /// Mean cross-entropy in bits per code bit, recorded on the tape.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, codes: &[Var]) -> Result<Var> {
        let logits = self.unroll(tape, p, codes)?;
        let mut total: Option<Var> = None;
        let mut count = 0;
        for (&l, &c) in logits.iter().zip(codes) {
            let targets = tape.value(c).map(|v| if v > T::ZERO { T::ONE } else { T::ZERO });
            count += targets.len();
            let bits = tape.bce_with_logits(l, targets)?;
            total = Some(match total {
                Some(t) => tape.add(t, bits)?,
                None => bits,
            });
        }
        let total = total.expect("at least one iteration");
        Ok(tape.scale(total, T::from_f64(1.0 / count as f64)))
    }
}

/// A probability model: layer structure plus parameters, bound to the codec
/// whose codes it models.
#[derive(Debug, Clone)]
pub struct EntropyModel<T> {
    net: EntropyNet,
    params: ParamStore<T>,
    codec_hash: [u8; 16],
}

impl<T: Scalar> EntropyModel<T> {
    pub fn new(arch: EntropyArchitecture, codec_hash: [u8; 16], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = EntropyNet::new(arch, &mut params, &mut rng)?;
        Ok(EntropyModel {
            net,
            params,
            codec_hash,
        })
    }

    pub fn from_named(arch: EntropyArchitecture, codec_hash: [u8; 16], named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(arch, codec_hash, 0)?;
        model.params.load_named(named)?;
        Ok(model)
    }

    pub fn net(&self) -> &EntropyNet {
        &self.net
    }

    pub fn arch(&self) -> &EntropyArchitecture {
        self.net.arch()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn codec_hash(&self) -> [u8; 16] {
        self.codec_hash
    }

    /// Checks that this model was trained for the codec with `hash`.
    pub fn check_binding(&self, hash: &[u8; 16]) -> Result<()> {
        if &self.codec_hash != hash {
            return Err(Error::ModelMismatch(format!(
                "entropy model is bound to codec {}, not {}",
                hex_string(&self.codec_hash),
                hex_string(hash)
            )));
        }
        Ok(())
    }

    /// `P(c = 1)` of every bit of every iteration, evaluated with the same
    /// position-by-position arithmetic the coder uses.
    pub fn probabilities(&self, codes: &[CodeTensor]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = codes.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = (first.height(), first.width());
        let mut progressive = eval::Progressive::new(self, h, w)?;
        let mut out = Vec::with_capacity(codes.len());
        for c in codes {
            if (c.height(), c.width(), c.depth()) != (h, w, self.arch().code_depth) {
                return Err(config_err!("code tensors of one image must share a shape"));
            }
            let mut ev = progressive.begin_iteration()?;
            let mut probs = Vec::with_capacity(c.len());
            let mut buf = vec![0.0; c.depth()];
            for y in 0..h {
                for x in 0..w {
                    ev.probabilities(c, y, x, &mut buf);
                    probs.extend_from_slice(&buf);
                }
            }
            progressive.end_iteration(c)?;
            out.push(probs);
        }
        Ok(out)
    }

    /// Mean cross-entropy in bits per bit of the given codes.
    pub fn bits_per_bit(&self, codes: &[CodeTensor]) -> Result<f64> {
        let probs = self.probabilities(codes)?;
        let mut total = 0.0;
        let mut n = 0;
        for (c, p) in codes.iter().zip(&probs) {
            total += cross_entropy(c.bits(), p);
            n += c.len();
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `Σ -c log2 p - (1 - c) log2 (1 - p)` in bits.
pub fn cross_entropy(bits: &[u8], probs: &[f64]) -> f64 {
    bits.iter()
        .zip(probs)
        .map(|(&c, &p)| if c == 1 { -p.log2() } else { -(1.0 - p).log2() })
        .sum()
}
