//! Binary code tensors as emitted by the binarizer, one per iteration.

use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Code depth per spatial position.
pub const CODE_DEPTH: usize = 32;

/// Bits `c(y, x, d) ∈ {0, 1}` of one iteration, stored in `(y, x, d)` order.
/// A `+1` code is stored as `1`, a `-1` code as `0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeTensor {
    height: usize,
    width: usize,
    depth: usize,
    iteration: usize,
    bits: Vec<u8>,
}

impl CodeTensor {
    pub fn new(height: usize, width: usize, depth: usize, iteration: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width * depth {
            return Err(config_err!(
                "{} bits for a {height}×{width}×{depth} code tensor",
                bits.len()
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(config_err!("code tensors hold only 0 and 1"));
        }
        Ok(CodeTensor {
            height,
            width,
            depth,
            iteration,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize, iteration: usize) -> Self {
        CodeTensor {
            height,
            width,
            depth,
            iteration,
            bits: vec![0; height * width * depth],
        }
    }

    /// Converts a single-image `±1` tensor; the sign decides the bit, with 0 treated as `+1`.
    pub fn from_signs<T: Scalar>(t: &Tensor<T>, iteration: usize) -> Result<Self> {
        let [b, h, w, d] = t.shape().0;
        if b != 1 {
            return Err(config_err!("code tensors hold a single image, got batch {b}"));
        }
        let bits = t.data().iter().map(|&v| u8::from(v >= T::ZERO)).collect();
        Ok(CodeTensor {
            height: h,
            width: w,
            depth: d,
            iteration,
            bits,
        })
    }

    /// The `±1` form fed back to the networks.
    pub fn to_signs<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b == 1 { T::ONE } else { -T::ONE })
            .collect();
        Tensor::from_vec(self.shape(), data).expect("bit count matches shape")
    }

    pub fn shape(&self) -> Shape {
        Shape::hwc(self.height, self.width, self.depth)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    pub fn get(&self, y: usize, x: usize, d: usize) -> u8 {
        self.bits[(y * self.width + x) * self.depth + d]
    }

    pub fn set(&mut self, y: usize, x: usize, d: usize, bit: u8) {
        self.bits[(y * self.width + x) * self.depth + d] = bit & 1;
    }

    pub fn flip(&mut self, y: usize, x: usize, d: usize) {
        self.bits[(y * self.width + x) * self.depth + d] ^= 1;
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }
}
