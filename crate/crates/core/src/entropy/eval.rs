//! Position-by-position evaluation of the probability model.
//!
//! Both ends of the arithmetic coder run this path: the encoder over known
//! codes, the decoder over codes it is filling in. Every sum is accumulated
//! in one fixed order without fused multiply-add, and `z1` is computed with
//! the portable kernels, so both ends produce bit-identical probabilities.

use crate::cells::DetachedState;
use crate::codes::CodeTensor;
use crate::error::{config_err, Error, Result};
use crate::nn::Conv2d;
use crate::tensor::tape::elu;
use crate::tensor::{Scalar, Shape, Tape, Tensor};

use super::{EntropyModel, CONTEXT_KERNEL};

/// Weight and bias slices of one convolution.
struct Weights<'a, T> {
    w: &'a [T],
    b: Option<&'a [T]>,
    cin: usize,
    cout: usize,
}

impl<'a, T: Scalar> Weights<'a, T> {
    fn of(model: &'a EntropyModel<T>, conv: &Conv2d) -> Self {
        Weights {
            w: model.params.get(conv.weight).data(),
            b: conv.bias.map(|b| model.params.get(b).data()),
            cin: conv.in_depth,
            cout: conv.out_depth,
        }
    }

    /// Row of output weights for kernel tap `tap` and input channel `ci`.
    fn row(&self, tap: usize, ci: usize) -> &'a [T] {
        let off = (tap * self.cin + ci) * self.cout;
        &self.w[off..off + self.cout]
    }

    fn init(&self, acc: &mut [T]) {
        match self.b {
            Some(b) => acc.copy_from_slice(b),
            None => acc.fill(T::ZERO),
        }
    }

    /// `acc += Σ_ci input[ci] · W[tap, ci, :]`.
    fn accumulate(&self, tap: usize, input: &[T], acc: &mut [T]) {
        for (ci, &v) in input.iter().enumerate() {
            for (a, &w) in acc.iter_mut().zip(self.row(tap, ci)) {
                *a += v * w;
            }
        }
    }
}

/// Cross-iteration part of the model: the `z1` context and the state of the
/// LSTM inside the `z1` network.
pub struct Progressive<'m, T> {
    model: &'m EntropyModel<T>,
    height: usize,
    width: usize,
    z1: Tensor<T>,
    state: DetachedState<T>,
    iteration: usize,
}

impl<'m, T: Scalar> Progressive<'m, T> {
    pub fn new(model: &'m EntropyModel<T>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(config_err!("empty code grid {height}×{width}"));
        }
        let mut tape = Tape::inference();
        let state = model.net.zero_z1_state(&mut tape, 1, height, width).detach(&tape);
        Ok(Progressive {
            model,
            height,
            width,
            z1: Tensor::zeros(Shape::hwc(height, width, model.arch().features)),
            state,
            iteration: 0,
        })
    }

    /// 1-based index of the iteration the next evaluator serves.
    pub fn iteration(&self) -> usize {
        self.iteration + 1
    }

    /// Context for the current iteration (all zeros for the first).
    pub fn z1(&self) -> &Tensor<T> {
        &self.z1
    }

    pub fn begin_iteration(&self) -> Result<PositionEvaluator<'_, T>> {
        PositionEvaluator::new(self.model, self.height, self.width, &self.z1)
    }

    /// Feeds the completed codes of the current iteration into the `z1` network.
    pub fn end_iteration(&mut self, codes: &CodeTensor) -> Result<()> {
        if (codes.height(), codes.width()) != (self.height, self.width) {
            return Err(config_err!("code grid changed between iterations"));
        }
        let mut tape = Tape::inference();
        let p = self.model.params.bind(&mut tape);
        let c = tape.constant(codes.to_signs());
        let state = self.state.attach(&mut tape);
        let (z1, next) = self.model.net.z1(&mut tape, &p, c, &state)?;
        self.z1 = tape.value(z1).clone();
        self.state = next.detach(&tape);
        self.iteration += 1;
        Ok(())
    }
}

/// `z1` for the iteration following `history`, which must be non-empty.
pub fn compute_z1<T: Scalar>(model: &EntropyModel<T>, history: &[CodeTensor]) -> Result<Tensor<T>> {
    let first = history
        .first()
        .ok_or_else(|| Error::Usage("the first iteration has no previous codes for z1".into()))?;
    let mut prog = Progressive::new(model, first.height(), first.width())?;
    for c in history {
        prog.end_iteration(c)?;
    }
    Ok(prog.z1)
}

/// Probabilities of one iteration, one position at a time in raster order.
pub struct PositionEvaluator<'a, T> {
    context: Weights<'a, T>,
    line_input: Weights<'a, T>,
    line_state: Weights<'a, T>,
    head1: Weights<'a, T>,
    head2: Weights<'a, T>,
    context_taps: Vec<(usize, usize)>,
    line_taps: Vec<usize>,
    height: usize,
    width: usize,
    features: usize,
    /// `[z0, z1]` per position; `z0` is filled as positions are reached.
    joined: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    h_cur: Vec<T>,
    c_cur: Vec<T>,
    /// State-to-state contribution for the current row.
    recurrent: Vec<T>,
    next: (usize, usize),
    scratch: Vec<T>,
}

impl<'a, T: Scalar> PositionEvaluator<'a, T> {
    fn new(model: &'a EntropyModel<T>, height: usize, width: usize, z1: &Tensor<T>) -> Result<Self> {
        let net = &model.net;
        let f = net.arch().features;
        if z1.shape() != Shape::hwc(height, width, f) {
            return Err(config_err!("z1 {:?} does not fit a {height}×{width} grid", z1.shape()));
        }
        let mut joined = vec![T::ZERO; height * width * 2 * f];
        for (dst, src) in joined.chunks_mut(2 * f).zip(z1.data().chunks(f)) {
            dst[f..].copy_from_slice(src);
        }
        let context_taps = net.context_mask.active().collect();
        let line_taps = net.line_input_mask.active().map(|(_, kx)| kx).collect();
        Ok(PositionEvaluator {
            context: Weights::of(model, &net.context),
            line_input: Weights::of(model, &net.line_input),
            line_state: Weights::of(model, &net.line_state),
            head1: Weights::of(model, &net.head1),
            head2: Weights::of(model, &net.head2),
            context_taps,
            line_taps,
            height,
            width,
            features: f,
            joined,
            h_prev: vec![T::ZERO; width * f],
            c_prev: vec![T::ZERO; width * f],
            h_cur: vec![T::ZERO; width * f],
            c_cur: vec![T::ZERO; width * f],
            recurrent: vec![T::ZERO; width * 4 * f],
            next: (0, 0),
            scratch: vec![T::ZERO; 4 * f],
        })
    }

    fn start_row(&mut self, y: usize) {
        if y > 0 {
            std::mem::swap(&mut self.h_prev, &mut self.h_cur);
            std::mem::swap(&mut self.c_prev, &mut self.c_cur);
        }
        let f = self.features;
        for x in 0..self.width {
            let acc = &mut self.recurrent[x * 4 * f..(x + 1) * 4 * f];
            self.line_state.init(acc);
            for kx in 0..3 {
                let Some(sx) = (x + kx).checked_sub(1).filter(|&s| s < self.width) else {
                    continue;
                };
                self.line_state
                    .accumulate(kx, &self.h_prev[sx * f..(sx + 1) * f], acc);
            }
        }
    }

    /// Writes `P(c(y, x, d) = 1)` for every `d` into `out`. Reads only codes at
    /// positions before `(y, x)`; positions must be visited in raster order.
    pub fn probabilities(&mut self, codes: &CodeTensor, y: usize, x: usize, out: &mut [f64]) {
        assert_eq!((y, x), self.next, "positions must be evaluated in raster order");
        assert_eq!(out.len(), self.head2.cout);
        if x == 0 {
            self.start_row(y);
        }
        let f = self.features;
        let w = self.width;

        // Stage 1: masked context convolution at (y, x).
        let half = CONTEXT_KERNEL / 2;
        let z0 = &mut self.scratch[..f];
        self.context.init(z0);
        for &(ky, kx) in &self.context_taps {
            let (Some(sy), Some(sx)) = ((y + ky).checked_sub(half), (x + kx).checked_sub(half)) else {
                continue;
            };
            if sx >= w {
                continue;
            }
            let tap = ky * CONTEXT_KERNEL + kx;
            for ci in 0..codes.depth() {
                let row = self.context.row(tap, ci);
                if codes.get(sy, sx, ci) == 1 {
                    for (a, &wv) in z0.iter_mut().zip(row) {
                        *a += wv;
                    }
                } else {
                    for (a, &wv) in z0.iter_mut().zip(row) {
                        *a -= wv;
                    }
                }
            }
        }
        let base = (y * w + x) * 2 * f;
        self.joined[base..base + f].copy_from_slice(z0);

        // Stage 2: line LSTM update at (y, x).
        let pre = &mut self.scratch[..4 * f];
        self.line_input.init(pre);
        for &kx in &self.line_taps {
            let Some(sx) = (x + kx).checked_sub(1) else {
                continue;
            };
            let off = (y * w + sx) * 2 * f;
            self.line_input.accumulate(kx, &self.joined[off..off + 2 * f], pre);
        }
        for (p, &r) in pre.iter_mut().zip(&self.recurrent[x * 4 * f..(x + 1) * 4 * f]) {
            *p += r;
        }
        for j in 0..f {
            let fg = pre[j].sigmoid();
            let ig = pre[f + j].sigmoid();
            let og = pre[2 * f + j].sigmoid();
            let cand = pre[3 * f + j].tanh();
            let c = fg * self.c_prev[x * f + j] + ig * cand;
            self.c_cur[x * f + j] = c;
            self.h_cur[x * f + j] = og * c.tanh();
        }

        // Stage 3: 1×1 head.
        let mut e = vec![T::ZERO; self.head1.cout];
        self.head1.init(&mut e);
        self.head1.accumulate(0, &self.h_cur[x * f..(x + 1) * f], &mut e);
        for v in &mut e {
            *v = elu(*v);
        }
        let mut logits = vec![T::ZERO; self.head2.cout];
        self.head2.init(&mut logits);
        self.head2.accumulate(0, &e, &mut logits);
        for (o, l) in out.iter_mut().zip(logits) {
            *o = l.sigmoid().to_f64();
        }

        self.next = if x + 1 == w { (y + 1, 0) } else { (y, x + 1) };
        debug_assert!(self.next.0 <= self.height);
    }
}
