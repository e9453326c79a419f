//! Raw numeric kernels over flat NHWC buffers.

use super::{Scalar, Shape};
use crate::error::{config_err, Result};

/// Which matrix-multiply implementation convolutions use.
///
/// `Fast` dispatches to SIMD kernels whose rounding can differ across CPUs.
/// `Portable` accumulates every output in a fixed sequential order with plain
/// IEEE multiply and add, so the same inputs give the same bits everywhere.
/// Anything that decides code bits at inference time runs `Portable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernels {
    #[default]
    Fast,
    Portable,
}

/// Maximum im2col buffer size, in elements.
const COL_CHUNK: usize = 1 << 20;

#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    kernels: Kernels,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    match kernels {
        Kernels::Fast => T::gemm_fast(m, k, n, a, a_strides, b, b_strides, c, accumulate),
        Kernels::Portable => gemm_portable(m, k, n, a, a_strides, b, b_strides, c, accumulate),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_portable<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (ars, acs): (isize, isize),
    b: &[T],
    (brs, bcs): (isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    let (ars, acs, brs, bcs) = (ars as usize, acs as usize, brs as usize, bcs as usize);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if !accumulate {
            row.fill(T::ZERO);
        }
        for p in 0..k {
            let av = a[i * ars + p * acs];
            if bcs == 1 {
                let brow = &b[p * brs..p * brs + n];
                for (cv, &bv) in row.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            } else {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[p * brs + j * bcs];
                }
            }
        }
    }
}

/// Same-padded strided convolution geometry.
///
/// Output extent is `ceil(input / stride)`; the total padding needed is split
/// with the smaller half on the top/left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub kernel: Shape,
    pub output: Shape,
    pub stride: (usize, usize),
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, kernel: Shape, stride: (usize, usize)) -> Result<Self> {
        let [kh, kw, cin, cout] = kernel.0;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(config_err!("convolution stride must be at least 1"));
        }
        if cin != input.depth() {
            return Err(config_err!(
                "kernel expects depth {cin} but input {:?} has depth {}",
                input,
                input.depth()
            ));
        }
        if kh == 0 || kw == 0 || cout == 0 {
            return Err(config_err!("degenerate kernel {:?}", kernel));
        }
        let oh = input.height().div_ceil(stride.0);
        let ow = input.width().div_ceil(stride.1);
        let pad_h = ((oh.max(1) - 1) * stride.0 + kh).saturating_sub(input.height());
        let pad_w = ((ow.max(1) - 1) * stride.1 + kw).saturating_sub(input.width());
        Ok(ConvGeometry {
            input,
            kernel,
            output: Shape::new(input.batch(), oh, ow, cout),
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel.0[0] == 1 && self.kernel.0[1] == 1 && self.stride == (1, 1)
    }

    fn rows(&self) -> usize {
        self.output.batch() * self.output.height() * self.output.width()
    }

    fn patch_len(&self) -> usize {
        self.kernel.0[0] * self.kernel.0[1] * self.kernel.0[2]
    }

    fn chunk_rows(&self) -> usize {
        (COL_CHUNK / self.patch_len().max(1)).max(1)
    }

    /// Input offset of patch row `r`, tap `(ky, kx)`, or None when in the padding.
    #[inline]
    fn source(&self, r: usize, ky: usize, kx: usize) -> Option<usize> {
        let (oh, ow) = (self.output.height(), self.output.width());
        let (h, w, c) = (self.input.height(), self.input.width(), self.input.depth());
        let b = r / (oh * ow);
        let oy = (r / ow) % oh;
        let ox = r % ow;
        let iy = (oy * self.stride.0 + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride.1 + kx).checked_sub(self.pad_left)?;
        if iy >= h || ix >= w {
            return None;
        }
        Some(((b * h + iy) * w + ix) * c)
    }

    fn im2col<T: Scalar>(&self, x: &[T], row0: usize, rows: usize, col: &mut Vec<T>) {
        let [kh, kw, cin, _] = self.kernel.0;
        let k = self.patch_len();
        col.clear();
        col.resize(rows * k, T::ZERO);
        for r in 0..rows {
            let dst = &mut col[r * k..(r + 1) * k];
            for ky in 0..kh {
                for kx in 0..kw {
                    if let Some(src) = self.source(row0 + r, ky, kx) {
                        let off = (ky * kw + kx) * cin;
                        dst[off..off + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], row0: usize, rows: usize, dx: &mut [T]) {
        let [kh, kw, cin, _] = self.kernel.0;
        let k = self.patch_len();
        for r in 0..rows {
            let srow = &col[r * k..(r + 1) * k];
            for ky in 0..kh {
                for kx in 0..kw {
                    if let Some(dst) = self.source(row0 + r, ky, kx) {
                        let off = (ky * kw + kx) * cin;
                        for (d, &s) in dx[dst..dst + cin].iter_mut().zip(&srow[off..off + cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeometry, kernels: Kernels) -> Vec<T> {
    let n = g.kernel.0[3];
    let m = g.rows();
    let k = g.patch_len();
    let mut out = vec![T::ZERO; m * n];
    if g.is_pointwise() {
        gemm(kernels, m, k, n, x, (k as isize, 1), w, (n as isize, 1), &mut out, false);
        return out;
    }
    let mut col = Vec::new();
    let step = g.chunk_rows();
    let mut row0 = 0;
    while row0 < m {
        let rows = step.min(m - row0);
        g.im2col(x, row0, rows, &mut col);
        gemm(
            kernels,
            rows,
            k,
            n,
            &col,
            (k as isize, 1),
            w,
            (n as isize, 1),
            &mut out[row0 * n..(row0 + rows) * n],
            false,
        );
        row0 += rows;
    }
    out
}

/// Gradients of a convolution with respect to its input and/or kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &ConvGeometry,
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
    kernels: Kernels,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = g.kernel.0[3];
    let m = g.rows();
    let k = g.patch_len();
    let mut dx = want_dx.then(|| vec![T::ZERO; g.input.len()]);
    let mut dw = want_dw.then(|| vec![T::ZERO; g.kernel.len()]);
    if g.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            gemm(kernels, k, m, n, x, (1, k as isize), dout, (n as isize, 1), dw, false);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kernels, m, n, k, dout, (n as isize, 1), w, (1, n as isize), dx, false);
        }
        return (dx, dw);
    }
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let step = g.chunk_rows();
    let mut row0 = 0;
    while row0 < m {
        let rows = step.min(m - row0);
        let dchunk = &dout[row0 * n..(row0 + rows) * n];
        if let Some(dw) = dw.as_mut() {
            g.im2col(x, row0, rows, &mut col);
            gemm(kernels, k, rows, n, &col, (1, k as isize), dchunk, (n as isize, 1), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            dcol.clear();
            dcol.resize(rows * k, T::ZERO);
            gemm(kernels, rows, n, k, dchunk, (n as isize, 1), w, (1, n as isize), &mut dcol, false);
            g.col2im(&dcol, row0, rows, dx);
        }
        row0 += rows;
    }
    (dx, dw)
}

pub fn depth_to_space<T: Scalar>(x: &[T], shape: Shape, block: usize) -> Result<(Shape, Vec<T>)> {
    let [b, h, w, c] = shape.0;
    let cells = block * block;
    if block == 0 || c % cells != 0 {
        return Err(config_err!("depth {c} is not divisible by {cells} for depth-to-space"));
    }
    let co = c / cells;
    let out_shape = Shape::new(b, h * block, w * block, co);
    let mut out = vec![T::ZERO; shape.len()];
    for_each_block(b, h, w, block, co, |src, dst| out[dst..dst + co].copy_from_slice(&x[src..src + co]));
    Ok((out_shape, out))
}

pub fn space_to_depth<T: Scalar>(x: &[T], shape: Shape, block: usize) -> Result<(Shape, Vec<T>)> {
    let [b, h, w, c] = shape.0;
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(config_err!("spatial extent {h}×{w} is not divisible by {block}"));
    }
    let (ho, wo) = (h / block, w / block);
    let out_shape = Shape::new(b, ho, wo, c * block * block);
    let mut out = vec![T::ZERO; shape.len()];
    for_each_block(b, ho, wo, block, c, |deep, spatial| {
        out[deep..deep + c].copy_from_slice(&x[spatial..spatial + c])
    });
    Ok((out_shape, out))
}

/// Visits (deep offset, spatial offset) pairs relating the `h×w×(c·block²)`
/// layout and the `(h·block)×(w·block)×c` layout.
fn for_each_block(
    b: usize,
    h: usize,
    w: usize,
    block: usize,
    c: usize,
    mut f: impl FnMut(usize, usize),
) {
    let deep_c = c * block * block;
    let (hs, ws) = (h * block, w * block);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let deep = ((bi * h + y) * w + x) * deep_c;
                for dy in 0..block {
                    for dx in 0..block {
                        let spatial = ((bi * hs + y * block + dy) * ws + x * block + dx) * c;
                        f(deep + (dy * block + dx) * c, spatial);
                    }
                }
            }
        }
    }
}
