//! Eager reverse-mode automatic differentiation.
//!
//! Every operation evaluates immediately and, when gradients are enabled and
//! at least one operand needs them, records enough to replay its adjoint.

use super::kernels::{self, ConvGeometry, Kernels};
use super::{CausalMask, Scalar, Shape, Tensor};
use crate::error::{config_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { input: Var, kernel: Var, geom: ConvGeometry },
    AddBias { input: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulMap { input: Var, map: Var },
    DivMap { input: Var, map: Var },
    Affine { input: Var, scale: T },
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Abs(Var),
    SliceDepth { input: Var, start: usize },
    ConcatDepth(Vec<Var>),
    SliceRows { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    DepthToSpace { input: Var, block: usize },
    SpaceToDepth { input: Var, block: usize },
    StraightThrough(Var),
    ComplexBound(Var),
    Sum(Var),
    MulConst { input: Var, factor: Tensor<T> },
    Zoh { input: Var, factor: usize },
    BceLogits { logits: Var, targets: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    kernels: Kernels,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape using the fast matrix kernels.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            kernels: Kernels::Fast,
        }
    }

    /// A non-recording tape using the portable kernels, for bit-exact inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            kernels: Kernels::Portable,
        }
    }

    pub fn with_kernels(mut self, kernels: Kernels) -> Self {
        self.kernels = kernels;
        self
    }

    pub fn kernels(&self) -> Kernels {
        self.kernels
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value. Outstanding `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.push_leaf(value, needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(config_err!("{what}: shape {:?} does not match {:?}", sa, sb));
        }
        Ok(sa)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.same_shape(a, b, what)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, &[a], op)
    }

    /// Same-padded 2-D convolution; `kernel` is `[kh, kw, in_depth, out_depth]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride)?;
        let out = kernels::conv2d_forward(self.data(input), self.data(kernel), &geom, self.kernels);
        Ok(self.push(
            Tensor::from_parts(geom.output, out),
            &[input, kernel],
            Op::Conv { input, kernel, geom },
        ))
    }

    /// Stride-1 convolution whose kernel is multiplied by a causal mask, so
    /// masked taps neither contribute nor receive gradient.
    pub fn masked_conv2d(&mut self, input: Var, kernel: Var, mask: &CausalMask) -> Result<Var> {
        let ks = self.shape(kernel);
        if (ks.0[0], ks.0[1]) != mask.extent() {
            return Err(config_err!(
                "mask extent {:?} does not match kernel {:?}",
                mask.extent(),
                ks
            ));
        }
        let masked = self.mul_const(kernel, mask.expand(ks.0[2], ks.0[3]))?;
        self.conv2d(input, masked, (1, 1))
    }

    /// Adds a per-depth bias of shape `[1, 1, 1, depth]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input);
        let bs = self.shape(bias);
        if bs.len() != shape.depth() {
            return Err(config_err!("bias {:?} does not match depth of {:?}", bs, shape));
        }
        let b = self.data(bias);
        let out = self
            .data(input)
            .chunks(shape.depth())
            .flat_map(|px| px.iter().zip(b).map(|(&x, &bv)| x + bv))
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), &[input, bias], Op::AddBias { input, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn check_map(&self, input: Var, map: Var) -> Result<Shape> {
        let s = self.shape(input);
        let m = self.shape(map);
        if m != s.with_depth(1) {
            return Err(config_err!("map {:?} cannot broadcast over {:?}", m, s));
        }
        Ok(s)
    }

    fn map_op(&mut self, input: Var, map: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let s = self.check_map(input, map)?;
        let m = self.data(map);
        let f = &f;
        let out = self
            .data(input)
            .chunks(s.depth())
            .zip(m)
            .flat_map(|(px, &g)| px.iter().map(move |&x| f(x, g)))
            .collect();
        Ok(self.push(Tensor::from_parts(s, out), &[input, map], op))
    }

    /// Multiplies every channel by a depth-1 map of the same spatial extent.
    pub fn mul_map(&mut self, input: Var, map: Var) -> Result<Var> {
        self.map_op(input, map, |x, g| x * g, Op::MulMap { input, map })
    }

    /// Divides every channel by a depth-1 map of the same spatial extent.
    pub fn div_map(&mut self, input: Var, map: Var) -> Result<Var> {
        self.map_op(input, map, |x, g| x / g, Op::DivMap { input, map })
    }

    /// `scale·x + offset` elementwise.
    pub fn affine(&mut self, input: Var, scale: T, offset: T) -> Var {
        self.unary(input, |x| scale * x + offset, Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, scale: T) -> Var {
        self.unary(input, |x| scale * x, Op::Affine { input, scale })
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, input: Var) -> Var {
        let neg = -T::ONE;
        self.unary(input, |x| T::ONE - x, Op::Affine { input, scale: neg })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, T::sigmoid, Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, T::tanh, Op::Tanh(input))
    }

    /// `x` for positive inputs, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, input: Var) -> Var {
        self.unary(input, elu, Op::Elu(input))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, T::abs, Op::Abs(input))
    }

    pub fn slice_depth(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        if start + len > s.depth() || len == 0 {
            return Err(config_err!("depth slice {start}..{} out of {:?}", start + len, s));
        }
        let out = self
            .data(input)
            .chunks(s.depth())
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::from_parts(s.with_depth(len), out),
            &[input],
            Op::SliceDepth { input, start },
        ))
    }

    /// Splits the depth axis into `parts` equal slices.
    pub fn split_depth(&mut self, input: Var, parts: usize) -> Result<Vec<Var>> {
        let d = self.shape(input).depth();
        if parts == 0 || d % parts != 0 {
            return Err(config_err!("depth {d} does not split into {parts} parts"));
        }
        let len = d / parts;
        (0..parts).map(|i| self.slice_depth(input, i * len, len)).collect()
    }

    pub fn concat_depth(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| config_err!("empty concat"))?);
        let mut depth = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.with_depth(1) != first.with_depth(1) {
                return Err(config_err!("concat shape {:?} vs {:?}", s, first));
            }
            depth += s.depth();
        }
        let out_shape = first.with_depth(depth);
        let pixels = first.len() / first.depth();
        let mut out = Vec::with_capacity(out_shape.len());
        for p in 0..pixels {
            for &v in inputs {
                let d = self.shape(v).depth();
                out.extend_from_slice(&self.data(v)[p * d..(p + 1) * d]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            inputs,
            Op::ConcatDepth(inputs.to_vec()),
        ))
    }

    /// Rows `start..start + len` of the height axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [b, h, w, c] = self.shape(input).0;
        if start + len > h || len == 0 {
            return Err(config_err!("row slice {start}..{} out of height {h}", start + len));
        }
        let row = w * c;
        let mut out = Vec::with_capacity(b * len * row);
        let data = self.data(input);
        for bi in 0..b {
            let base = (bi * h + start) * row;
            out.extend_from_slice(&data[base..base + len * row]);
        }
        Ok(self.push(
            Tensor::from_parts(Shape::new(b, len, w, c), out),
            &[input],
            Op::SliceRows { input, start },
        ))
    }

    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| config_err!("empty concat"))?);
        let [b, _, w, c] = first.0;
        let mut h = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.batch() != b || s.width() != w || s.depth() != c {
                return Err(config_err!("row concat shape {:?} vs {:?}", s, first));
            }
            h += s.height();
        }
        let row = w * c;
        let mut out = Vec::with_capacity(b * h * row);
        for bi in 0..b {
            for &v in inputs {
                let hv = self.shape(v).height();
                out.extend_from_slice(&self.data(v)[bi * hv * row..(bi + 1) * hv * row]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(Shape::new(b, h, w, c), out),
            inputs,
            Op::ConcatRows(inputs.to_vec()),
        ))
    }

    pub fn depth_to_space(&mut self, input: Var, block: usize) -> Result<Var> {
        let (shape, out) = kernels::depth_to_space(self.data(input), self.shape(input), block)?;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[input],
            Op::DepthToSpace { input, block },
        ))
    }

    pub fn space_to_depth(&mut self, input: Var, block: usize) -> Result<Var> {
        let (shape, out) = kernels::space_to_depth(self.data(input), self.shape(input), block)?;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[input],
            Op::SpaceToDepth { input, block },
        ))
    }

    /// Emits `forward` in place of `input` while passing gradients to `input`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, input: Var, forward: Tensor<T>) -> Result<Var> {
        if forward.shape() != self.shape(input) {
            return Err(config_err!("straight-through value shape mismatch"));
        }
        Ok(self.push(forward, &[input], Op::StraightThrough(input)))
    }

    /// Complex bound on a `[re(n), im(n)]` depth layout: `z` when `|z| ≤ 1`,
    /// `z / |z|` otherwise.
    pub fn complex_bound(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.depth() % 2 != 0 {
            return Err(config_err!("complex layout needs even depth, got {}", s.depth()));
        }
        let n = s.depth() / 2;
        let mut out = self.data(input).to_vec();
        for px in out.chunks_mut(s.depth()) {
            for j in 0..n {
                let (re, im) = bound(px[j], px[n + j]);
                px[j] = re;
                px[n + j] = im;
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), &[input], Op::ComplexBound(input)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: T = self.data(input).iter().copied().sum();
        self.push(Tensor::from_parts(Shape::scalar(), vec![total]), &[input], Op::Sum(input))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, input: Var, factor: Tensor<T>) -> Result<Var> {
        let s = self.shape(input);
        if factor.shape() != s {
            return Err(config_err!("constant factor {:?} vs {:?}", factor.shape(), s));
        }
        let out = self
            .data(input)
            .iter()
            .zip(factor.data())
            .map(|(&x, &f)| x * f)
            .collect();
        Ok(self.push(Tensor::from_parts(s, out), &[input], Op::MulConst { input, factor }))
    }

    /// Zero-order-hold upsampling: each value is replicated over a
    /// `factor × factor` block.
    pub fn zoh_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(config_err!("upsampling factor must be positive"));
        }
        let [b, h, w, c] = self.shape(input).0;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data(input);
        let mut out = Vec::with_capacity(b * ho * wo * c);
        for bi in 0..b {
            for y in 0..ho {
                for x in 0..wo {
                    let off = ((bi * h + y / factor) * w + x / factor) * c;
                    out.extend_from_slice(&src[off..off + c]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(Shape::new(b, ho, wo, c), out),
            &[input],
            Op::Zoh { input, factor },
        ))
    }

    /// Binary cross-entropy in bits, summed over all elements, of
    /// `sigmoid(logits)` against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        if targets.shape() != self.shape(logits) {
            return Err(config_err!("target shape mismatch in cross-entropy"));
        }
        let ln2 = T::from_f64(std::f64::consts::LN_2);
        let total: T = self
            .data(logits)
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| bce_nats(l, t) / ln2)
            .sum();
        Ok(self.push(
            Tensor::from_parts(Shape::scalar(), vec![total]),
            &[logits],
            Op::BceLogits { logits, targets },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(node, &g, &mut grads);
        }
        // Only leaves keep their gradients; interior slots were taken above.
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, kernel, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*kernel),
                    geom,
                    g,
                    self.wants(*input),
                    self.wants(*kernel),
                    self.kernels,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *kernel, dw);
                }
            }
            Op::AddBias { input, bias } => {
                if self.wants(*input) {
                    accumulate(grads, *input, g.to_vec());
                }
                if self.wants(*bias) {
                    let d = self.shape(*bias).len();
                    let mut db = vec![T::ZERO; d];
                    for px in g.chunks(d) {
                        for (a, &v) in db.iter_mut().zip(px) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |_| g.to_vec());
                self.acc_map(grads, *b, |_| g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |_| g.to_vec());
                self.acc_map(grads, *b, |_| g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_map(grads, *a, |_| g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                self.acc_map(grads, *b, |_| g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_map(grads, *a, |_| g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
                self.acc_map(grads, *b, |_| {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect()
                });
            }
            Op::MulMap { input, map } | Op::DivMap { input, map } => {
                let divide = matches!(node.op, Op::DivMap { .. });
                let d = self.shape(*input).depth();
                let (xv, mv) = (self.data(*input), self.data(*map));
                self.acc_map(grads, *input, |_| {
                    g.chunks(d)
                        .zip(mv)
                        .flat_map(|(gp, &m)| gp.iter().map(move |&gv| if divide { gv / m } else { gv * m }))
                        .collect()
                });
                self.acc_map(grads, *map, |_| {
                    g.chunks(d)
                        .zip(xv.chunks(d))
                        .zip(mv)
                        .map(|((gp, xp), &m)| {
                            let s: T = gp.iter().zip(xp).map(|(&gv, &xv)| gv * xv).sum();
                            if divide {
                                -s / (m * m)
                            } else {
                                s
                            }
                        })
                        .collect()
                });
            }
            Op::Affine { input, scale } => {
                self.acc_map(grads, *input, |_| g.iter().map(|&v| v * *scale).collect());
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, |_| {
                g.iter().zip(y).map(|(&g, &y)| g * y * (T::ONE - y)).collect()
            }),
            Op::Tanh(a) => self.acc_map(grads, *a, |_| {
                g.iter().zip(y).map(|(&g, &y)| g * (T::ONE - y * y)).collect()
            }),
            Op::Elu(a) => {
                let xv = self.data(*a);
                self.acc_map(grads, *a, |_| {
                    g.iter()
                        .zip(xv.iter().zip(y))
                        .map(|(&g, (&x, &y))| if x > T::ZERO { g } else { g * (y + T::ONE) })
                        .collect()
                })
            }
            Op::Abs(a) => {
                let xv = self.data(*a);
                self.acc_map(grads, *a, |_| {
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            if x > T::ZERO {
                                g
                            } else if x < T::ZERO {
                                -g
                            } else {
                                T::ZERO
                            }
                        })
                        .collect()
                })
            }
            Op::SliceDepth { input, start } => {
                if self.wants(*input) {
                    let s = self.shape(*input);
                    let len = node.value.shape().depth();
                    let slot = slot(grads, *input, s.len());
                    for (dst, src) in slot.chunks_mut(s.depth()).zip(g.chunks(len)) {
                        for (d, &v) in dst[*start..*start + len].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatDepth(inputs) => {
                let total = node.value.shape().depth();
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let d = s.depth();
                    if self.wants(v) {
                        let slot = slot(grads, v, s.len());
                        for (dst, src) in slot.chunks_mut(d).zip(g.chunks(total)) {
                            for (a, &b) in dst.iter_mut().zip(&src[offset..offset + d]) {
                                *a += b;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::SliceRows { input, start } => {
                if self.wants(*input) {
                    let [b, h, w, c] = self.shape(*input).0;
                    let len = node.value.shape().height();
                    let row = w * c;
                    let slot = slot(grads, *input, b * h * row);
                    for bi in 0..b {
                        let dst = &mut slot[(bi * h + start) * row..(bi * h + start + len) * row];
                        let src = &g[bi * len * row..(bi + 1) * len * row];
                        for (a, &v) in dst.iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
            }
            Op::ConcatRows(inputs) => {
                let [b, h, w, c] = node.value.shape().0;
                let row = w * c;
                let mut offset = 0;
                for &v in inputs {
                    let hv = self.shape(v).height();
                    if self.wants(v) {
                        let slot = slot(grads, v, b * hv * row);
                        for bi in 0..b {
                            let src = &g[(bi * h + offset) * row..(bi * h + offset + hv) * row];
                            for (a, &s) in slot[bi * hv * row..(bi + 1) * hv * row].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    offset += hv;
                }
            }
            Op::DepthToSpace { input, block } => {
                if self.wants(*input) {
                    let (_, d) = kernels::space_to_depth(g, node.value.shape(), *block)
                        .expect("adjoint of a valid depth-to-space");
                    accumulate(grads, *input, d);
                }
            }
            Op::SpaceToDepth { input, block } => {
                if self.wants(*input) {
                    let (_, d) = kernels::depth_to_space(g, node.value.shape(), *block)
                        .expect("adjoint of a valid space-to-depth");
                    accumulate(grads, *input, d);
                }
            }
            Op::StraightThrough(a) => self.acc_map(grads, *a, |_| g.to_vec()),
            Op::ComplexBound(a) => {
                let xv = self.data(*a);
                let depth = self.shape(*a).depth();
                let n = depth / 2;
                self.acc_map(grads, *a, |_| {
                    let mut out = g.to_vec();
                    for (px, gp) in xv.chunks(depth).zip(out.chunks_mut(depth)) {
                        for j in 0..n {
                            let (re, im) = (px[j], px[n + j]);
                            let r2 = re * re + im * im;
                            if r2 > T::ONE {
                                let r = r2.sqrt();
                                let r3 = r2 * r;
                                let (gr, gi) = (gp[j], gp[n + j]);
                                gp[j] = (gr * im * im - gi * re * im) / r3;
                                gp[n + j] = (gi * re * re - gr * re * im) / r3;
                            }
                        }
                    }
                    out
                })
            }
            Op::Sum(a) => {
                let n = self.shape(*a).len();
                self.acc_map(grads, *a, |_| vec![g[0]; n]);
            }
            Op::MulConst { input, factor } => self.acc_map(grads, *input, |_| {
                g.iter().zip(factor.data()).map(|(&g, &f)| g * f).collect()
            }),
            Op::Zoh { input, factor } => {
                if self.wants(*input) {
                    let [b, h, w, c] = self.shape(*input).0;
                    let (ho, wo) = (h * factor, w * factor);
                    let slot = slot(grads, *input, b * h * w * c);
                    for bi in 0..b {
                        for yy in 0..ho {
                            for xx in 0..wo {
                                let dst = ((bi * h + yy / factor) * w + xx / factor) * c;
                                let src = ((bi * ho + yy) * wo + xx) * c;
                                for k in 0..c {
                                    slot[dst + k] += g[src + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.data(*logits);
                let scale = g[0] / T::from_f64(std::f64::consts::LN_2);
                self.acc_map(grads, *logits, |_| {
                    lv.iter()
                        .zip(targets.data())
                        .map(|(&l, &t)| (l.sigmoid() - t) * scale)
                        .collect()
                })
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(()) -> Vec<T>) {
        if self.wants(v) {
            accumulate(grads, v, f(()));
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        empty => *empty = Some(contribution),
    }
}

pub(crate) fn elu<T: Scalar>(x: T) -> T {
    if x > T::ZERO {
        x
    } else {
        x.exp() - T::ONE
    }
}

/// `z` if `|z| ≤ 1`, else `z / |z|`.
pub(crate) fn bound<T: Scalar>(re: T, im: T) -> (T, T) {
    let r2 = re * re + im * im;
    if r2 > T::ONE {
        let r = r2.sqrt();
        (re / r, im / r)
    } else {
        (re, im)
    }
}

/// Numerically stable `-t·ln σ(l) - (1 - t)·ln(1 - σ(l))`.
pub(crate) fn bce_nats<T: Scalar>(l: T, t: T) -> T {
    let pos = if l > T::ZERO { l } else { T::ZERO };
    pos - l * t + (T::ONE + (-l.abs()).exp()).ln()
}

/// Gradients of the tape's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zeros if it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}
