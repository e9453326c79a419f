//! Convolutional recurrent cells: LSTM, associative LSTM, GRU and residual GRU.
//!
//! Every cell owns an input convolution `W` (carrying the layer stride and
//! the gate biases) and a bias-free hidden convolution `U` over the previous
//! state. Gate convolutions are fused: one `W` and one `U` produce all gate
//! pre-activations, which are then sliced along depth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Bound, Conv2d, ConvSpec, ParamStore};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Weight on the two residual projections of the residual GRU.
pub const RESIDUAL_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    Lstm,
    AssociativeLstm,
    Gru,
    ResidualGru,
}

impl CellKind {
    pub fn short_name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::AssociativeLstm => "alstm",
            CellKind::Gru => "gru",
            CellKind::ResidualGru => "rgru",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "alstm" => Ok(CellKind::AssociativeLstm),
            "gru" => Ok(CellKind::Gru),
            "rgru" => Ok(CellKind::ResidualGru),
            other => Err(crate::Error::Usage(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Geometry of one recurrent layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub in_depth: usize,
    /// Depth of the layer output (for the associative LSTM: real + imaginary).
    pub depth: usize,
    pub input_kernel: (usize, usize),
    pub hidden_kernel: usize,
    pub stride: usize,
}

/// LSTM cell and hidden state.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmState {
    pub c: Var,
    pub h: Var,
}

/// Complex cell and hidden state, each stored as `[re(n), im(n)]` along depth.
#[derive(Debug, Clone, Copy)]
pub struct AssocLstmState {
    pub c: Var,
    pub h: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGruState {
    pub h: Var,
}

#[derive(Debug, Clone, Copy)]
pub enum CellState {
    Lstm(ConvLstmState),
    Assoc(AssocLstmState),
    Gru(ConvGruState),
}

impl CellState {
    pub fn vars(&self) -> Vec<Var> {
        match *self {
            CellState::Lstm(s) => vec![s.c, s.h],
            CellState::Assoc(s) => vec![s.c, s.h],
            CellState::Gru(s) => vec![s.h],
        }
    }

    /// Copies the state values off a tape.
    pub fn detach<T: Scalar>(&self, tape: &Tape<T>) -> DetachedState<T> {
        DetachedState {
            kind: match self {
                CellState::Lstm(_) => StateKind::Lstm,
                CellState::Assoc(_) => StateKind::Assoc,
                CellState::Gru(_) => StateKind::Gru,
            },
            tensors: self.vars().into_iter().map(|v| tape.value(v).clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StateKind {
    Lstm,
    Assoc,
    Gru,
}

/// A recurrent state held outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedState<T> {
    kind: StateKind,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> DetachedState<T> {
    /// Re-enters the state on a tape as constants.
    pub fn attach(&self, tape: &mut Tape<T>) -> CellState {
        let v: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        match self.kind {
            StateKind::Lstm => CellState::Lstm(ConvLstmState { c: v[0], h: v[1] }),
            StateKind::Assoc => CellState::Assoc(AssocLstmState { c: v[0], h: v[1] }),
            StateKind::Gru => CellState::Gru(ConvGruState { h: v[0] }),
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: Conv2d,
    pub u: Conv2d,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct AssocLstmCell {
    pub w: Conv2d,
    pub u: Conv2d,
    /// Number of complex channels; the output depth is twice this.
    pub complex_depth: usize,
}

#[derive(Debug, Clone)]
pub struct GruCell {
    /// Produces `[z, r, candidate]` pre-activations from the input.
    pub w: Conv2d,
    /// Hidden contribution to `[z, r]`.
    pub u_gates: Conv2d,
    /// Hidden contribution to the candidate, applied to `r ⊙ h`.
    pub u_candidate: Conv2d,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualGruCell {
    pub gru: GruCell,
    /// Hidden-to-hidden residual projection.
    pub w_h: Conv2d,
    /// Input-to-output residual projection.
    pub w_ox: Conv2d,
}

#[derive(Debug, Clone)]
pub enum Cell {
    Lstm(LstmCell),
    Assoc(AssocLstmCell),
    Gru(GruCell),
    ResidualGru(ResidualGruCell),
}

fn gated<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    spec: &CellSpec,
    gate_depth: usize,
    hidden_in: usize,
) -> (Conv2d, Conv2d) {
    let (kh, kw) = spec.input_kernel;
    let w = Conv2d::new(
        store,
        rng,
        &format!("{name}.w"),
        ConvSpec::rect(kh, kw, spec.in_depth, gate_depth).stride(spec.stride),
    );
    let u = Conv2d::new(
        store,
        rng,
        &format!("{name}.u"),
        ConvSpec::new(spec.hidden_kernel, hidden_in, gate_depth).no_bias(),
    );
    (w, u)
}

impl GruCell {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: &CellSpec) -> Self {
        let d = spec.depth;
        let (kh, kw) = spec.input_kernel;
        let w = Conv2d::new(
            store,
            rng,
            &format!("{name}.w"),
            ConvSpec::rect(kh, kw, spec.in_depth, 3 * d).stride(spec.stride),
        );
        let u_gates = Conv2d::new(
            store,
            rng,
            &format!("{name}.u_gates"),
            ConvSpec::new(spec.hidden_kernel, d, 2 * d).no_bias(),
        );
        let u_candidate = Conv2d::new(
            store,
            rng,
            &format!("{name}.u_candidate"),
            ConvSpec::new(spec.hidden_kernel, d, d).no_bias(),
        );
        GruCell {
            w,
            u_gates,
            u_candidate,
            depth: d,
        }
    }

    fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let d = self.depth;
        let wx = self.w.forward(tape, p, x)?;
        let wx_gates = tape.slice_depth(wx, 0, 2 * d)?;
        let wx_cand = tape.slice_depth(wx, 2 * d, d)?;
        let uh = self.u_gates.forward(tape, p, h)?;
        let pre = tape.add(wx_gates, uh)?;
        let gates = tape.sigmoid(pre);
        let z = tape.slice_depth(gates, 0, d)?;
        let r = tape.slice_depth(gates, d, d)?;
        let rh = tape.mul(r, h)?;
        let ur = self.u_candidate.forward(tape, p, rh)?;
        let cand_pre = tape.add(wx_cand, ur)?;
        let cand = tape.tanh(cand_pre);
        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        tape.add(kept, fresh)
    }
}

/// `(a_re + i a_im)(b_re + i b_im)` on `[re, im]` depth layouts.
fn complex_mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, n: usize) -> Result<Var> {
    let (ar, ai) = (tape.slice_depth(a, 0, n)?, tape.slice_depth(a, n, n)?);
    let (br, bi) = (tape.slice_depth(b, 0, n)?, tape.slice_depth(b, n, n)?);
    let rr = tape.mul(ar, br)?;
    let ii = tape.mul(ai, bi)?;
    let ri = tape.mul(ar, bi)?;
    let ir = tape.mul(ai, br)?;
    let re = tape.sub(rr, ii)?;
    let im = tape.add(ri, ir)?;
    tape.concat_depth(&[re, im])
}

/// A real gate of depth `n` applied to a complex `[re, im]` value.
fn real_times_complex<T: Scalar>(tape: &mut Tape<T>, gate: Var, z: Var) -> Result<Var> {
    let both = tape.concat_depth(&[gate, gate])?;
    tape.mul(both, z)
}

impl Cell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: CellSpec,
    ) -> Result<Self> {
        if spec.depth == 0 || spec.in_depth == 0 || spec.stride == 0 {
            return Err(config_err!("degenerate recurrent layer {spec:?}"));
        }
        Ok(match spec.kind {
            CellKind::Lstm => {
                let (w, u) = gated(store, rng, name, &spec, 4 * spec.depth, spec.depth);
                Cell::Lstm(LstmCell {
                    w,
                    u,
                    depth: spec.depth,
                })
            }
            CellKind::AssociativeLstm => {
                if spec.depth % 2 != 0 {
                    return Err(config_err!(
                        "associative LSTM depth {} cannot be split into real and imaginary halves",
                        spec.depth
                    ));
                }
                let n = spec.depth / 2;
                // f, i, o real (n each); j, r_i, r_o complex (2n each).
                let (w, u) = gated(store, rng, name, &spec, 9 * n, spec.depth);
                Cell::Assoc(AssocLstmCell {
                    w,
                    u,
                    complex_depth: n,
                })
            }
            CellKind::Gru => Cell::Gru(GruCell::new(store, rng, name, &spec)),
            CellKind::ResidualGru => {
                let gru = GruCell::new(store, rng, name, &spec);
                let w_h = Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.w_h"),
                    ConvSpec::new(spec.hidden_kernel, spec.depth, spec.depth).no_bias(),
                );
                let (kh, kw) = spec.input_kernel;
                let w_ox = Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.w_ox"),
                    ConvSpec::rect(kh, kw, spec.in_depth, spec.depth)
                        .stride(spec.stride)
                        .no_bias(),
                );
                Cell::ResidualGru(ResidualGruCell { gru, w_h, w_ox })
            }
        })
    }

    /// Output depth of the layer.
    pub fn depth(&self) -> usize {
        match self {
            Cell::Lstm(c) => c.depth,
            Cell::Assoc(c) => 2 * c.complex_depth,
            Cell::Gru(c) => c.depth,
            Cell::ResidualGru(c) => c.gru.depth,
        }
    }

    fn input_conv(&self) -> &Conv2d {
        match self {
            Cell::Lstm(c) => &c.w,
            Cell::Assoc(c) => &c.w,
            Cell::Gru(c) => &c.w,
            Cell::ResidualGru(c) => &c.gru.w,
        }
    }

    /// Output spatial extent for an input of `height × width`.
    pub fn output_extent(&self, height: usize, width: usize) -> (usize, usize) {
        let (sy, sx) = self.input_conv().stride;
        (height.div_ceil(sy), width.div_ceil(sx))
    }

    /// All-zero state for an input of the given batch and spatial extent.
    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize, height: usize, width: usize) -> CellState {
        let (h, w) = self.output_extent(height, width);
        let shape = Shape::new(batch, h, w, self.depth());
        let mut z = || tape.constant(Tensor::zeros(shape));
        match self {
            Cell::Lstm(_) => CellState::Lstm(ConvLstmState { c: z(), h: z() }),
            Cell::Assoc(_) => CellState::Assoc(AssocLstmState { c: z(), h: z() }),
            Cell::Gru(_) | Cell::ResidualGru(_) => CellState::Gru(ConvGruState { h: z() }),
        }
    }

    /// One recurrent step; returns the layer output and the next state.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: &CellState,
    ) -> Result<(Var, CellState)> {
        match (self, state) {
            (Cell::Lstm(cell), CellState::Lstm(s)) => {
                let (out, next) = lstm_step(tape, p, cell, x, s)?;
                Ok((out, CellState::Lstm(next)))
            }
            (Cell::Assoc(cell), CellState::Assoc(s)) => {
                let (out, next) = assoc_lstm_step(tape, p, cell, x, s)?;
                Ok((out, CellState::Assoc(next)))
            }
            (Cell::Gru(cell), CellState::Gru(s)) => {
                let (out, next) = gru_step(tape, p, cell, x, s)?;
                Ok((out, CellState::Gru(next)))
            }
            (Cell::ResidualGru(cell), CellState::Gru(s)) => {
                let (out, next) = residual_gru_step(tape, p, cell, x, s)?;
                Ok((out, CellState::Gru(next)))
            }
            _ => Err(config_err!("recurrent state does not belong to this cell type")),
        }
    }
}

/// `[f, i, o, j] = [σ, σ, σ, tanh](W x + U h + b)`,
/// `c' = f ⊙ c + i ⊙ j`, `h' = o ⊙ tanh(c')`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cell: &LstmCell,
    x: Var,
    state: &ConvLstmState,
) -> Result<(Var, ConvLstmState)> {
    let wx = cell.w.forward(tape, p, x)?;
    let uh = cell.u.forward(tape, p, state.h)?;
    let pre = tape.add(wx, uh)?;
    let next = lstm_update(tape, pre, state.c, cell.depth)?;
    Ok((next.h, next))
}

/// Gate nonlinearities and state update from fused `[f, i, o, j]`
/// pre-activations of depth `4 · depth`.
pub fn lstm_update<T: Scalar>(tape: &mut Tape<T>, pre: Var, c: Var, depth: usize) -> Result<ConvLstmState> {
    let d = depth;
    let sig_pre = tape.slice_depth(pre, 0, 3 * d)?;
    let j_pre = tape.slice_depth(pre, 3 * d, d)?;
    let sig = tape.sigmoid(sig_pre);
    let f = tape.slice_depth(sig, 0, d)?;
    let i = tape.slice_depth(sig, d, d)?;
    let o = tape.slice_depth(sig, 2 * d, d)?;
    let j = tape.tanh(j_pre);
    let fc = tape.mul(f, c)?;
    let ij = tape.mul(i, j)?;
    let c = tape.add(fc, ij)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(ConvLstmState { c, h })
}

/// Associative LSTM with a single holographic copy:
/// `c' = f ⊙ c + r_i ⊙ i ⊙ j`, `h' = o ⊙ bnd(r_o ⊙ c')`, output `(Re h', Im h')`.
pub fn assoc_lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cell: &AssocLstmCell,
    x: Var,
    state: &AssocLstmState,
) -> Result<(Var, AssocLstmState)> {
    let n = cell.complex_depth;
    let wx = cell.w.forward(tape, p, x)?;
    let uh = cell.u.forward(tape, p, state.h)?;
    let pre = tape.add(wx, uh)?;
    let real_pre = tape.slice_depth(pre, 0, 3 * n)?;
    let gates = tape.sigmoid(real_pre);
    let f = tape.slice_depth(gates, 0, n)?;
    let i = tape.slice_depth(gates, n, n)?;
    let o = tape.slice_depth(gates, 2 * n, n)?;
    let mut complex = Vec::with_capacity(3);
    for k in 0..3 {
        let z = tape.slice_depth(pre, 3 * n + 2 * n * k, 2 * n)?;
        complex.push(tape.complex_bound(z)?);
    }
    let (j, r_in, r_out) = (complex[0], complex[1], complex[2]);
    let fc = real_times_complex(tape, f, state.c)?;
    let ij = real_times_complex(tape, i, j)?;
    let rij = complex_mul(tape, r_in, ij, n)?;
    let c = tape.add(fc, rij)?;
    let rc = complex_mul(tape, r_out, c, n)?;
    let bounded = tape.complex_bound(rc)?;
    let h = real_times_complex(tape, o, bounded)?;
    Ok((h, AssocLstmState { c, h }))
}

/// `h' = (1 - z) ⊙ h + z ⊙ tanh(W x + U(r ⊙ h))`.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cell: &GruCell,
    x: Var,
    state: &ConvGruState,
) -> Result<(Var, ConvGruState)> {
    let h = cell.step(tape, p, x, state.h)?;
    Ok((h, ConvGruState { h }))
}

/// GRU blend plus `α W_h h` on the state and `α W_ox x` on the output. The
/// returned state is the hidden value, not the output.
pub fn residual_gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cell: &ResidualGruCell,
    x: Var,
    state: &ConvGruState,
) -> Result<(Var, ConvGruState)> {
    let alpha = T::from_f64(RESIDUAL_ALPHA);
    let blend = cell.gru.step(tape, p, x, state.h)?;
    let wh = cell.w_h.forward(tape, p, state.h)?;
    let wh = tape.scale(wh, alpha);
    let h = tape.add(blend, wh)?;
    let wx = cell.w_ox.forward(tape, p, x)?;
    let wx = tape.scale(wx, alpha);
    let out = tape.add(h, wx)?;
    Ok((out, ConvGruState { h }))
}
