//! Named parameter storage and the convolution layer every network uses.

use std::ops::Index;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::{CausalMask, Scalar, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered list of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn replace_all(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(config_err!("expected {} tensors, got {}", self.tensors.len(), tensors.len()));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(config_err!(
                    "parameter {} has shape {:?}, replacement {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Replaces every tensor by the entry of the same name; the name set and
    /// all shapes must match exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(config_err!("expected {} tensors, got {}", self.tensors.len(), named.len()));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.tensors.len()];
        for (name, t) in named {
            let id = self
                .by_name(&name)
                .ok_or_else(|| config_err!("unexpected parameter {name:?}"))?;
            if slots[id.0].is_some() {
                return Err(config_err!("parameter {name:?} given twice"));
            }
            slots[id.0] = Some(t);
        }
        let tensors = slots.into_iter().map(|t| t.expect("all names seen")).collect();
        self.replace_all(tensors)
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::convert).collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(kh: usize, kw: usize, cin: usize, cout: usize) -> f64 {
    let fan_in = (kh * kw * cin) as f64;
    let fan_out = (kh * kw * cout) as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// Same-padded convolution with optional per-depth bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: (usize, usize),
    pub in_depth: usize,
    pub out_depth: usize,
    pub stride: (usize, usize),
}

/// Construction parameters for [`Conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub in_depth: usize,
    pub out_depth: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_depth: usize, out_depth: usize) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            in_depth,
            out_depth,
            stride: 1,
            bias: true,
        }
    }

    pub fn rect(kh: usize, kw: usize, in_depth: usize, out_depth: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            ..Self::new(1, in_depth, out_depth)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let limit = glorot_limit(kh, kw, spec.in_depth, spec.out_depth);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(Shape::kernel(kh, kw, spec.in_depth, spec.out_depth), limit, rng),
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::hwc(1, 1, spec.out_depth))));
        Conv2d {
            weight,
            bias,
            kernel: spec.kernel,
            in_depth: spec.in_depth,
            out_depth: spec.out_depth,
            stride: (spec.stride, spec.stride),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight], self.stride)?;
        self.finish(tape, p, y)
    }

    pub fn forward_masked<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mask: &CausalMask,
    ) -> Result<Var> {
        let y = tape.masked_conv2d(x, p[self.weight], mask)?;
        self.finish(tape, p, y)
    }

    fn finish<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, y: Var) -> Result<Var> {
        match self.bias {
            Some(b) => tape.add_bias(y, p[b]),
            None => Ok(y),
        }
    }
}
