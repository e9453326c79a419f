//! The iterative residual image codec: encoder, binarizer, decoder, gain
//! network and the k-iteration reconstruction loop.
//!
//! The per-iteration computation lives in [`CodecNet::iterate`] and is shared
//! by training (one recording tape over all iterations) and by the inference
//! sessions (a fresh portable-kernel tape per iteration, with recurrent states
//! carried between tapes as plain tensors).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{Cell, CellKind, CellSpec, CellState, DetachedState};
use crate::codes::{CodeTensor, CODE_DEPTH};
use crate::error::{config_err, Error, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, ParamStore};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Spatial downsampling between the image and the code grid.
pub const CODE_STRIDE: usize = 16;
/// Side of the block sharing one gain value.
pub const GAIN_BLOCK: usize = 32;
/// Added to the gain network output so that gains lie in `(1, ∞)`.
pub const GAIN_OFFSET: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Every iteration predicts the full image.
    OneShot,
    /// Every iteration adds a correction to the running reconstruction.
    Additive,
    /// Additive, with the residual scaled by a per-block gain before encoding.
    ResidualScaled,
}

impl Mode {
    pub fn short_name(self) -> &'static str {
        match self {
            Mode::OneShot => "oneshot",
            Mode::Additive => "additive",
            Mode::ResidualScaled => "scaled",
        }
    }

    /// Image sides must be a multiple of this.
    pub fn alignment(self) -> usize {
        match self {
            Mode::ResidualScaled => GAIN_BLOCK,
            _ => CODE_STRIDE,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oneshot" => Ok(Mode::OneShot),
            "additive" => Ok(Mode::Additive),
            "scaled" => Ok(Mode::ResidualScaled),
            other => Err(Error::Usage(format!("unknown reconstruction mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Full-size architecture.
    Paper,
    /// All depths divided by 8 (code depth kept at 32), 8 iterations.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Usage(format!("unknown profile {other:?}"))),
        }
    }
}

/// Layer depths of the codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub cell: CellKind,
    pub mode: Mode,
    pub encoder_conv: usize,
    pub encoder_rnn: [usize; 3],
    pub code_depth: usize,
    pub decoder_conv: usize,
    pub decoder_rnn: [usize; 4],
    pub gain_depth: usize,
    /// Default number of iterations.
    pub iterations: usize,
}

impl Architecture {
    pub fn paper(cell: CellKind, mode: Mode) -> Self {
        Architecture {
            cell,
            mode,
            encoder_conv: 64,
            encoder_rnn: [256, 512, 512],
            code_depth: CODE_DEPTH,
            decoder_conv: 512,
            decoder_rnn: [512, 512, 256, 128],
            gain_depth: 32,
            iterations: 16,
        }
    }

    pub fn desk(cell: CellKind, mode: Mode) -> Self {
        let p = Self::paper(cell, mode);
        Architecture {
            encoder_conv: p.encoder_conv / 8,
            encoder_rnn: p.encoder_rnn.map(|d| d / 8),
            decoder_conv: p.decoder_conv / 8,
            decoder_rnn: p.decoder_rnn.map(|d| d / 8),
            gain_depth: p.gain_depth / 8,
            iterations: 8,
            ..p
        }
    }

    pub fn for_profile(profile: Profile, cell: CellKind, mode: Mode) -> Self {
        match profile {
            Profile::Paper => Self::paper(cell, mode),
            Profile::Desk => Self::desk(cell, mode),
        }
    }

    /// Code bits emitted per iteration for an image of the given size.
    pub fn bits_per_iteration(&self, height: usize, width: usize) -> usize {
        (height / CODE_STRIDE) * (width / CODE_STRIDE) * self.code_depth
    }

    fn validate(&self) -> Result<()> {
        let depths = [self.encoder_conv, self.code_depth, self.decoder_conv]
            .into_iter()
            .chain(self.encoder_rnn)
            .chain(self.decoder_rnn);
        for d in depths {
            if d == 0 {
                return Err(config_err!("zero layer depth in {self:?}"));
            }
        }
        if self.mode == Mode::ResidualScaled && self.gain_depth == 0 {
            return Err(config_err!("residual scaling needs a gain network depth"));
        }
        for d in self.decoder_rnn {
            if d % 4 != 0 {
                return Err(config_err!(
                    "decoder depth {d} is not divisible by 4 for depth-to-space"
                ));
            }
        }
        Ok(())
    }
}

/// How the binarizer turns tanh activations into codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binarization {
    /// `+1` with probability `(1 + a) / 2`; straight-through gradient.
    Stochastic,
    /// `+1` iff `a >= 0`; straight-through gradient.
    Deterministic,
    /// No quantization: the activation itself. Only meaningful for gradient checks.
    Relaxed,
}

/// Per-run options of the iteration loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub binarization: Binarization,
    /// Replaces every gain of the gain network by this constant.
    pub fixed_gain: Option<f64>,
}

impl RunOptions {
    pub fn training() -> Self {
        RunOptions {
            binarization: Binarization::Stochastic,
            fixed_gain: None,
        }
    }

    pub fn inference() -> Self {
        RunOptions {
            binarization: Binarization::Deterministic,
            fixed_gain: None,
        }
    }

    pub fn with_fixed_gain(mut self, gain: f64) -> Self {
        self.fixed_gain = Some(gain);
        self
    }
}

#[derive(Debug, Clone)]
struct GainNet {
    layers: Vec<Conv2d>,
}

/// Layer structure of the codec. Parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CodecNet {
    arch: Architecture,
    encoder_conv: Conv2d,
    encoder_rnn: Vec<Cell>,
    binarizer: Conv2d,
    decoder_conv: Conv2d,
    decoder_rnn: Vec<Cell>,
    output_conv: Conv2d,
    gain: Option<GainNet>,
}

/// Recurrent state of the encoder between iterations.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub cells: Vec<CellState>,
}

/// Everything the decoder carries between iterations: recurrent states, the
/// running reconstruction `x̂_{t-1}` and the upsampled gain map `g_{t-1}`.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub cells: Vec<CellState>,
    pub reconstruction: Var,
    pub gain_map: Option<Var>,
}

/// Tape handles produced by one iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationVars {
    /// `±1` codes (or relaxed activations).
    pub codes: Var,
    pub reconstruction: Var,
    pub residual: Var,
    /// Block gains `g_t` (ResidualScaled only).
    pub gain: Option<Var>,
}

/// Values of a complete k-iteration run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace<T> {
    pub codes: Vec<Tensor<T>>,
    pub reconstructions: Vec<Tensor<T>>,
    pub residuals: Vec<Tensor<T>>,
    pub gains: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> IterationTrace<T> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `β Σ_t Σ |r_t|` with `β = 1 / (B·H·W·C·n)`.
    pub fn loss(&self) -> f64 {
        let Some(first) = self.residuals.first() else {
            return 0.0;
        };
        let total: f64 = self
            .residuals
            .iter()
            .flat_map(|r| r.data().iter())
            .map(|v| v.to_f64().abs())
            .sum();
        total / (first.len() * self.residuals.len()) as f64
    }

    /// Codes of one image of the batch as code tensors, one per iteration.
    pub fn code_tensors(&self, batch_index: usize) -> Result<Vec<CodeTensor>> {
        self.codes
            .iter()
            .enumerate()
            .map(|(t, c)| CodeTensor::from_signs(&c.batch_item(batch_index), t + 1))
            .collect()
    }
}

fn check_iterations(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Usage("at least one iteration is required".into()));
    }
    Ok(())
}

impl CodecNet {
    /// Builds the layer structure, registering freshly initialized parameters.
    pub fn new<T: Scalar, R: Rng>(arch: Architecture, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let encoder_kind = match arch.cell {
            CellKind::AssociativeLstm => CellKind::Lstm,
            k => k,
        };
        let encoder_conv = Conv2d::new(
            store,
            rng,
            "encoder.conv",
            ConvSpec::new(3, 3, arch.encoder_conv).stride(2),
        );
        let mut encoder_rnn = Vec::new();
        let mut depth = arch.encoder_conv;
        for (i, &d) in arch.encoder_rnn.iter().enumerate() {
            let spec = CellSpec {
                kind: encoder_kind,
                in_depth: depth,
                depth: d,
                input_kernel: (3, 3),
                hidden_kernel: 1,
                stride: 2,
            };
            encoder_rnn.push(Cell::new(store, rng, &format!("encoder.rnn{}", i + 1), spec)?);
            depth = d;
        }
        let binarizer = Conv2d::new(store, rng, "binarizer", ConvSpec::new(1, depth, arch.code_depth));
        let decoder_conv = Conv2d::new(
            store,
            rng,
            "decoder.conv1",
            ConvSpec::new(1, arch.code_depth, arch.decoder_conv),
        );
        let mut decoder_rnn = Vec::new();
        let mut depth = arch.decoder_conv;
        let kernels = [(2, 1), (3, 1), (3, 3), (3, 3)];
        for (i, (&d, &(input, hidden))) in arch.decoder_rnn.iter().zip(&kernels).enumerate() {
            let spec = CellSpec {
                kind: arch.cell,
                in_depth: depth,
                depth: d,
                input_kernel: (input, input),
                hidden_kernel: hidden,
                stride: 1,
            };
            decoder_rnn.push(Cell::new(store, rng, &format!("decoder.rnn{}", i + 1), spec)?);
            depth = d / 4;
        }
        let output_conv = Conv2d::new(store, rng, "decoder.conv2", ConvSpec::new(1, depth, 3));
        let gain = (arch.mode == Mode::ResidualScaled).then(|| {
            let mut layers = Vec::new();
            let mut depth = 3;
            for i in 0..4 {
                let spec = ConvSpec::new(3, depth, arch.gain_depth).stride(2);
                layers.push(Conv2d::new(store, rng, &format!("gain.conv{}", i + 1), spec));
                depth = arch.gain_depth;
            }
            layers.push(Conv2d::new(store, rng, "gain.conv5", ConvSpec::new(2, depth, 1).stride(2)));
            GainNet { layers }
        });
        Ok(CodecNet {
            arch,
            encoder_conv,
            encoder_rnn,
            binarizer,
            decoder_conv,
            decoder_rnn,
            output_conv,
            gain,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Checks that `height × width` can pass through the network.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let a = self.arch.mode.alignment();
        if height == 0 || width == 0 || height % a != 0 || width % a != 0 {
            return Err(config_err!(
                "image extent {height}×{width} is not a multiple of {a}; pad it first"
            ));
        }
        Ok(())
    }

    pub fn zero_encoder_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize, height: usize, width: usize) -> EncoderState {
        let (mut h, mut w) = (height / 2, width / 2);
        let cells = self
            .encoder_rnn
            .iter()
            .map(|c| {
                let s = c.zero_state(tape, batch, h, w);
                (h, w) = c.output_extent(h, w);
                s
            })
            .collect();
        EncoderState { cells }
    }

    pub fn zero_decoder_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize, height: usize, width: usize) -> DecoderState {
        let (mut h, mut w) = (height / CODE_STRIDE, width / CODE_STRIDE);
        let cells = self
            .decoder_rnn
            .iter()
            .map(|c| {
                let s = c.zero_state(tape, batch, h, w);
                (h, w) = (2 * h, 2 * w);
                s
            })
            .collect();
        let reconstruction = tape.constant(Tensor::zeros(Shape::new(batch, height, width, 3)));
        let gain_map = (self.arch.mode == Mode::ResidualScaled)
            .then(|| tape.constant(Tensor::full(Shape::new(batch, height, width, 1), T::ONE)));
        DecoderState {
            cells,
            reconstruction,
            gain_map,
        }
    }

    /// Encoder `E_t`: residual image to latent at 1/16 resolution.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: Var,
        state: &EncoderState,
    ) -> Result<(Var, EncoderState)> {
        let [_, h, w, d] = tape.shape(input).0;
        if d != 3 || h % CODE_STRIDE != 0 || w % CODE_STRIDE != 0 {
            return Err(config_err!("encoder input {:?} is not an aligned RGB image", tape.shape(input)));
        }
        let mut x = self.encoder_conv.forward(tape, p, input)?;
        let mut cells = Vec::with_capacity(self.encoder_rnn.len());
        for (cell, s) in self.encoder_rnn.iter().zip(&state.cells) {
            let (out, next) = cell.step(tape, p, x, s)?;
            cells.push(next);
            x = out;
        }
        Ok((x, EncoderState { cells }))
    }

    /// Binarizer `B`: 1×1 convolution, tanh, then quantization to `±1`.
    pub fn binarize<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        latent: Var,
        mode: Binarization,
        rng: &mut R,
    ) -> Result<Var> {
        let pre = self.binarizer.forward(tape, p, latent)?;
        let act = tape.tanh(pre);
        let values = tape.value(act);
        let forward = match mode {
            Binarization::Relaxed => return Ok(act),
            Binarization::Deterministic => values.map(|a| if a >= T::ZERO { T::ONE } else { -T::ONE }),
            Binarization::Stochastic => {
                let data = values
                    .data()
                    .iter()
                    .map(|a| {
                        let p_plus = 0.5 * (1.0 + a.to_f64());
                        if rng.gen::<f64>() < p_plus {
                            T::ONE
                        } else {
                            -T::ONE
                        }
                    })
                    .collect();
                Tensor::from_vec(values.shape(), data)?
            }
        };
        tape.straight_through(act, forward)
    }

    /// Decoder `D_t`: codes to a `(-1, 1)` image term at full resolution.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        codes: Var,
        cells: &[CellState],
    ) -> Result<(Var, Vec<CellState>)> {
        let depth = tape.shape(codes).depth();
        if depth != self.arch.code_depth {
            return Err(config_err!(
                "decoder expects {} code planes, got {depth}",
                self.arch.code_depth
            ));
        }
        let mut x = self.decoder_conv.forward(tape, p, codes)?;
        let mut next = Vec::with_capacity(cells.len());
        for (cell, s) in self.decoder_rnn.iter().zip(cells) {
            let (out, state) = cell.step(tape, p, x, s)?;
            next.push(state);
            x = tape.depth_to_space(out, 2)?;
        }
        let out = self.output_conv.forward(tape, p, x)?;
        Ok((tape.tanh(out), next))
    }

    /// Gain estimator `G`: one gain per 32×32 block, each in `(1, ∞)`.
    pub fn gain<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, reconstruction: Var) -> Result<Var> {
        let net = self
            .gain
            .as_ref()
            .ok_or_else(|| config_err!("this codec has no gain network"))?;
        let [_, h, w, _] = tape.shape(reconstruction).0;
        if h % GAIN_BLOCK != 0 || w % GAIN_BLOCK != 0 {
            return Err(config_err!("gain network input {h}×{w} is not a multiple of {GAIN_BLOCK}"));
        }
        let mut x = reconstruction;
        for layer in &net.layers {
            let y = layer.forward(tape, p, x)?;
            x = tape.elu(y);
        }
        Ok(tape.affine(x, T::ONE, T::from_f64(GAIN_OFFSET)))
    }

    /// One iteration of the reconstruction loop.
    ///
    /// `x` is the original image; `decoder.reconstruction` holds `x̂_{t-1}`.
    #[allow(clippy::too_many_arguments)]
    pub fn iterate<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        encoder: &mut EncoderState,
        decoder: &mut DecoderState,
        options: &RunOptions,
        rng: &mut R,
    ) -> Result<IterationVars> {
        let mut input = tape.sub(x, decoder.reconstruction)?;
        if let Some(g) = decoder.gain_map {
            input = tape.mul_map(input, g)?;
        }
        let (latent, next_encoder) = self.encode(tape, p, input, encoder)?;
        *encoder = next_encoder;
        let codes = self.binarize(tape, p, latent, options.binarization, rng)?;
        let (reconstruction, gain) = self.reconstruct(tape, p, codes, decoder, options)?;
        let residual = tape.sub(x, reconstruction)?;
        Ok(IterationVars {
            codes,
            reconstruction,
            residual,
            gain,
        })
    }

    /// Decoder half of an iteration: updates `decoder` in place and returns
    /// `x̂_t` and, in scaled mode, `g_t`.
    pub fn reconstruct<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        codes: Var,
        decoder: &mut DecoderState,
        options: &RunOptions,
    ) -> Result<(Var, Option<Var>)> {
        let (term, cells) = self.decode(tape, p, codes, &decoder.cells)?;
        decoder.cells = cells;
        let reconstruction = match self.arch.mode {
            Mode::OneShot => term,
            Mode::Additive => tape.add(decoder.reconstruction, term)?,
            Mode::ResidualScaled => {
                let g = decoder
                    .gain_map
                    .ok_or_else(|| config_err!("scaled decoder state without gain map"))?;
                let unscaled = tape.div_map(term, g)?;
                tape.add(decoder.reconstruction, unscaled)?
            }
        };
        decoder.reconstruction = reconstruction;
        let gain = if self.arch.mode == Mode::ResidualScaled {
            let g = match options.fixed_gain {
                Some(v) => {
                    let [b, h, w, _] = tape.shape(reconstruction).0;
                    let shape = Shape::new(b, h / GAIN_BLOCK, w / GAIN_BLOCK, 1);
                    tape.constant(Tensor::full(shape, T::from_f64(v)))
                }
                None => self.gain(tape, p, reconstruction)?,
            };
            decoder.gain_map = Some(tape.zoh_upsample(g, GAIN_BLOCK)?);
            Some(g)
        } else {
            None
        };
        Ok((reconstruction, gain))
    }

    /// Runs `k` iterations on one recording tape. Used for training and for
    /// gradient checks.
    #[allow(clippy::too_many_arguments)]
    pub fn unroll<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        k: usize,
        options: &RunOptions,
        rng: &mut R,
    ) -> Result<Vec<IterationVars>> {
        check_iterations(k)?;
        let [b, h, w, _] = tape.shape(x).0;
        self.check_extent(h, w)?;
        let mut encoder = self.zero_encoder_state(tape, b, h, w);
        let mut decoder = self.zero_decoder_state(tape, b, h, w);
        (0..k)
            .map(|_| self.iterate(tape, p, x, &mut encoder, &mut decoder, options, rng))
            .collect()
    }
}

/// `β Σ_t Σ |r_t|` recorded on the tape.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, iterations: &[IterationVars]) -> Result<Var> {
    let first = iterations
        .first()
        .ok_or_else(|| Error::Usage("loss over zero iterations".into()))?;
    let count = tape.shape(first.residual).len() * iterations.len();
    let mut total: Option<Var> = None;
    for it in iterations {
        let a = tape.abs(it.residual);
        let s = tape.sum(a);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one iteration");
    Ok(tape.scale(total, T::from_f64(1.0 / count as f64)))
}

/// A codec: layer structure plus parameter values.
#[derive(Debug, Clone)]
pub struct Codec<T> {
    net: CodecNet,
    params: ParamStore<T>,
}

impl<T: Scalar> Codec<T> {
    /// Freshly initialized codec; the same seed always gives the same weights.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = CodecNet::new(arch, &mut params, &mut rng)?;
        Ok(Codec { net, params })
    }

    /// Rebuilds a codec from stored `(name, tensor)` pairs.
    pub fn from_named(arch: Architecture, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut codec = Self::new(arch, 0)?;
        codec.params.load_named(named)?;
        Ok(codec)
    }

    pub fn arch(&self) -> &Architecture {
        self.net.arch()
    }

    pub fn net(&self) -> &CodecNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn convert<U: Scalar>(&self) -> Codec<U> {
        Codec {
            net: self.net.clone(),
            params: self.params.convert(),
        }
    }

    /// Runs `k` iterations on a batch with portable kernels and no gradient.
    pub fn run_iterations<R: Rng>(
        &self,
        x: &Tensor<T>,
        k: usize,
        options: &RunOptions,
        rng: &mut R,
    ) -> Result<IterationTrace<T>> {
        check_iterations(k)?;
        let mut session = EncoderSession::new(self, x.clone())?;
        let mut trace = IterationTrace {
            codes: Vec::with_capacity(k),
            reconstructions: Vec::with_capacity(k),
            residuals: Vec::with_capacity(k),
            gains: Vec::with_capacity(k),
        };
        for _ in 0..k {
            let step = session.step(options, rng)?;
            trace.codes.push(step.codes);
            trace.reconstructions.push(step.reconstruction);
            trace.residuals.push(step.residual);
            trace.gains.push(step.gain);
        }
        Ok(trace)
    }

    /// Deterministic codes of a single aligned image.
    pub fn encode_image(&self, x: &Tensor<T>, k: usize) -> Result<Vec<CodeTensor>> {
        if x.shape().batch() != 1 {
            return Err(config_err!("encode_image takes a single image"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.run_iterations(x, k, &RunOptions::inference(), &mut rng)?
            .code_tensors(0)
    }

    /// Reconstructions after each iteration, from codes alone.
    pub fn decode_codes(&self, codes: &[CodeTensor]) -> Result<Vec<Tensor<T>>> {
        let first = codes
            .first()
            .ok_or_else(|| Error::Usage("no code iterations to decode".into()))?;
        let mut session = DecoderSession::new(self, first.height() * CODE_STRIDE, first.width() * CODE_STRIDE)?;
        codes.iter().map(|c| session.push(c)).collect()
    }
}

struct Detached<T> {
    cells: Vec<DetachedState<T>>,
}

impl<T: Scalar> Detached<T> {
    fn take(tape: &Tape<T>, cells: &[CellState]) -> Self {
        Detached {
            cells: cells.iter().map(|c| c.detach(tape)).collect(),
        }
    }

    fn attach(&self, tape: &mut Tape<T>) -> Vec<CellState> {
        self.cells.iter().map(|c| c.attach(tape)).collect()
    }
}

struct DetachedDecoder<T> {
    cells: Detached<T>,
    reconstruction: Tensor<T>,
    gain_map: Option<Tensor<T>>,
}

impl<T: Scalar> DetachedDecoder<T> {
    fn take(tape: &Tape<T>, d: &DecoderState) -> Self {
        DetachedDecoder {
            cells: Detached::take(tape, &d.cells),
            reconstruction: tape.value(d.reconstruction).clone(),
            gain_map: d.gain_map.map(|g| tape.value(g).clone()),
        }
    }

    fn attach(&self, tape: &mut Tape<T>) -> DecoderState {
        DecoderState {
            cells: self.cells.attach(tape),
            reconstruction: tape.constant(self.reconstruction.clone()),
            gain_map: self.gain_map.as_ref().map(|g| tape.constant(g.clone())),
        }
    }
}

/// Output of one inference iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput<T> {
    pub codes: Tensor<T>,
    pub reconstruction: Tensor<T>,
    pub residual: Tensor<T>,
    pub gain: Option<Tensor<T>>,
}

/// Encoder-side inference: runs full iterations on a fixed image.
pub struct EncoderSession<'a, T> {
    codec: &'a Codec<T>,
    image: Tensor<T>,
    encoder: Detached<T>,
    decoder: DetachedDecoder<T>,
    iteration: usize,
}

impl<'a, T: Scalar> EncoderSession<'a, T> {
    pub fn new(codec: &'a Codec<T>, image: Tensor<T>) -> Result<Self> {
        let [b, h, w, d] = image.shape().0;
        if d != 3 {
            return Err(config_err!("codec input must have 3 channels, got {d}"));
        }
        codec.net.check_extent(h, w)?;
        let mut tape = Tape::inference();
        let enc = codec.net.zero_encoder_state(&mut tape, b, h, w);
        let dec = codec.net.zero_decoder_state(&mut tape, b, h, w);
        Ok(EncoderSession {
            codec,
            image,
            encoder: Detached::take(&tape, &enc.cells),
            decoder: DetachedDecoder::take(&tape, &dec),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step<R: Rng>(&mut self, options: &RunOptions, rng: &mut R) -> Result<IterationOutput<T>> {
        let mut tape = Tape::inference();
        let p = self.codec.params.bind(&mut tape);
        let x = tape.constant(self.image.clone());
        let mut encoder = EncoderState {
            cells: self.encoder.attach(&mut tape),
        };
        let mut decoder = self.decoder.attach(&mut tape);
        let out = self
            .codec
            .net
            .iterate(&mut tape, &p, x, &mut encoder, &mut decoder, options, rng)?;
        self.encoder = Detached::take(&tape, &encoder.cells);
        self.decoder = DetachedDecoder::take(&tape, &decoder);
        self.iteration += 1;
        Ok(IterationOutput {
            codes: tape.value(out.codes).clone(),
            reconstruction: tape.value(out.reconstruction).clone(),
            residual: tape.value(out.residual).clone(),
            gain: out.gain.map(|g| tape.value(g).clone()),
        })
    }
}

/// Decoder-side inference: rebuilds reconstructions from codes alone.
pub struct DecoderSession<'a, T> {
    codec: &'a Codec<T>,
    height: usize,
    width: usize,
    state: DetachedDecoder<T>,
}

impl<'a, T: Scalar> DecoderSession<'a, T> {
    pub fn new(codec: &'a Codec<T>, height: usize, width: usize) -> Result<Self> {
        codec.net.check_extent(height, width)?;
        let mut tape = Tape::inference();
        let dec = codec.net.zero_decoder_state(&mut tape, 1, height, width);
        Ok(DecoderSession {
            codec,
            height,
            width,
            state: DetachedDecoder::take(&tape, &dec),
        })
    }

    /// Consumes one iteration of codes and returns the updated reconstruction.
    pub fn push(&mut self, codes: &CodeTensor) -> Result<Tensor<T>> {
        let expect = Shape::hwc(
            self.height / CODE_STRIDE,
            self.width / CODE_STRIDE,
            self.codec.arch().code_depth,
        );
        if codes.shape() != expect {
            return Err(config_err!("codes {:?} do not fit a {:?} grid", codes.shape(), expect));
        }
        let mut tape = Tape::inference();
        let p = self.codec.params.bind(&mut tape);
        let c = tape.constant(codes.to_signs());
        let mut decoder = self.state.attach(&mut tape);
        let (reconstruction, _) = self
            .codec
            .net
            .reconstruct(&mut tape, &p, c, &mut decoder, &RunOptions::inference())?;
        self.state = DetachedDecoder::take(&tape, &decoder);
        Ok(tape.value(reconstruction).clone())
    }
}
