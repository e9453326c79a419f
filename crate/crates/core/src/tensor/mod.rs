//! Dense NHWC tensors, the gradient tape and the optimizer.

mod adam;
pub mod kernels;
mod mask;
mod scalar;
pub(crate) mod tape;

use std::sync::Arc;

use rand::Rng;

use crate::error::{config_err, Result};

pub use adam::{AdamConfig, AdamState};
pub use kernels::Kernels;
pub use mask::{CausalMask, MaskKind};
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, Tape, Var};

/// Four-dimensional extent.
///
/// Activations use `[batch, height, width, depth]`; convolution kernels use
/// `[kernel_h, kernel_w, in_depth, out_depth]`. Depth is the fastest-varying
/// axis in memory for both.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, depth: usize) -> Self {
        Shape([batch, height, width, depth])
    }

    /// A rank-3 activation shape (batch of one).
    pub const fn hwc(height: usize, width: usize, depth: usize) -> Self {
        Shape([1, height, width, depth])
    }

    pub const fn kernel(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Shape([kh, kw, cin, cout])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn height(&self) -> usize {
        self.0[1]
    }
    pub fn width(&self) -> usize {
        self.0[2]
    }
    pub fn depth(&self) -> usize {
        self.0[3]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        Shape([self.0[0], self.0[1], self.0[2], depth])
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a}×{b}×{c}×{d}")
    }
}

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(config_err!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for buffers whose length is correct by construction.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor::from_parts(shape, vec![value; shape.len()])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor::from_parts(shape, (0..shape.len()).map(&mut f).collect())
    }

    pub fn uniform<R: Rng>(shape: Shape, limit: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..=limit)))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access, copying the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(config_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn get(&self, b: usize, y: usize, x: usize, d: usize) -> T {
        let [_, h, w, c] = self.shape.0;
        self.data[((b * h + y) * w + x) * c + d]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One batch element as a batch-of-one tensor.
    pub fn batch_item(&self, index: usize) -> Self {
        let per = self.shape.len() / self.shape.batch();
        let data = self.data[index * per..(index + 1) * per].to_vec();
        Tensor::from_parts(Shape([1, self.shape.0[1], self.shape.0[2], self.shape.0[3]]), data)
    }

    /// Stack batch-of-`n` tensors of identical spatial shape along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| config_err!("cannot stack zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.0[1..] != first.0[1..] {
                return Err(config_err!("stack shape mismatch {:?} vs {:?}", t.shape, first));
            }
            batch += t.shape.batch();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(
            Shape([batch, first.0[1], first.0[2], first.0[3]]),
            data,
        ))
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape, self.data.iter().map(|v| U::from_f64(v.to_f64())).collect())
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", &self.data[..])?;
        }
        write!(f, ")")
    }
}

/// Rearranges each `block²`-deep feature into a `block × block` spatial cell.
pub fn depth_to_space<T: Scalar>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let (shape, data) = kernels::depth_to_space(input.data(), input.shape(), block)?;
    Ok(Tensor::from_parts(shape, data))
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth<T: Scalar>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let (shape, data) = kernels::space_to_depth(input.data(), input.shape(), block)?;
    Ok(Tensor::from_parts(shape, data))
}

/// Stand-alone convolution (no tape), for inference code paths.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize),
    kernels: Kernels,
) -> Result<Tensor<T>> {
    let geom = kernels::ConvGeometry::new(input.shape(), kernel.shape(), stride)?;
    let out = kernels::conv2d_forward(input.data(), kernel.data(), &geom, kernels);
    Ok(Tensor::from_parts(geom.output, out))
}
