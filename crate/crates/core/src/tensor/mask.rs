use super::{Scalar, Shape, Tensor};
use crate::error::{config_err, Result};

/// Which taps relative to the current position a causal mask may keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Only positions strictly before the current one in raster order.
    Strict,
    /// Positions before the current one, plus the current one. Valid only on
    /// inputs that are themselves strictly causal.
    Inclusive,
}

/// A validated spatial mask for a stride-1, odd-sized convolution kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    kind: MaskKind,
    kh: usize,
    kw: usize,
    taps: Vec<bool>,
}

impl CausalMask {
    /// Checks that `taps` (row-major, `kh × kw`) respect `kind`.
    pub fn new(kind: MaskKind, kh: usize, kw: usize, taps: Vec<bool>) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(config_err!("masked kernels need odd extents, got {kh}×{kw}"));
        }
        if taps.len() != kh * kw {
            return Err(config_err!("mask has {} taps, expected {}", taps.len(), kh * kw));
        }
        let (cy, cx) = (kh / 2, kw / 2);
        for ky in 0..kh {
            for kx in 0..kw {
                let after = ky > cy || (ky == cy && kx > cx);
                let centre = ky == cy && kx == cx;
                let forbidden = after || (centre && kind == MaskKind::Strict);
                if forbidden && taps[ky * kw + kx] {
                    return Err(config_err!(
                        "mask tap ({ky}, {kx}) of a {kh}×{kw} {kind:?} mask reads a future position"
                    ));
                }
            }
        }
        Ok(CausalMask { kind, kh, kw, taps })
    }

    /// Keeps every tap the kind allows.
    pub fn full(kind: MaskKind, kh: usize, kw: usize) -> Result<Self> {
        let (cy, cx) = (kh / 2, kw / 2);
        let taps = (0..kh * kw)
            .map(|i| {
                let (ky, kx) = (i / kw, i % kw);
                ky < cy || (ky == cy && (kx < cx || (kx == cx && kind == MaskKind::Inclusive)))
            })
            .collect();
        Self::new(kind, kh, kw, taps)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn is_active(&self, ky: usize, kx: usize) -> bool {
        self.taps[ky * self.kw + kx]
    }

    pub fn active_taps(&self) -> usize {
        self.taps.iter().filter(|&&t| t).count()
    }

    /// Active `(ky, kx)` offsets in kernel order.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.kh * self.kw)
            .filter(|&i| self.taps[i])
            .map(|i| (i / self.kw, i % self.kw))
    }

    /// The mask broadcast to a `[kh, kw, cin, cout]` kernel.
    pub fn expand<T: Scalar>(&self, cin: usize, cout: usize) -> Tensor<T> {
        let per_tap = cin * cout;
        Tensor::from_fn(Shape::kernel(self.kh, self.kw, cin, cout), |i| {
            if self.taps[i / per_tap] {
                T::ONE
            } else {
                T::ZERO
            }
        })
    }
}
