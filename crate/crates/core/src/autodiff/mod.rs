//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node. [`Tape::backward`] walks the tape once in reverse
//! and accumulates adjoints additively at fan-out. The operation set is a
//! closed enum; adding an operation without an adjoint does not compile.

mod adjoint;
pub mod gradcheck;
mod params;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, index::IndexMap};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{check_tensor_gradient, finite_difference_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Constant,
    Param(String),
    Bmm { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddSuffix { x: Var, b: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Ln(Var),
    Gather { x: Var, index: Arc<Vec<usize>> },
    Reshape(Var),
    DepthwiseDown2 { x: Var, w: Var, b: Var },
    Bilinear { x: Var, scale: usize },
    TransConv { x: Var, w: Var, b: Var },
    Concat(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Named trainable leaf. Registering a name twice accumulates both uses
    /// into one gradient.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(name.to_string()), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false)
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let v = kernels::bmm(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(v, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = kernels::add_suffix(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::AddSuffix { x, b }, &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.dims(), bv.dims())));
        }
        let v = Tensor::new(av.dims(), av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect())?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        let v = self.value(x).map(|e| e * cs);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = kernels::gelu(self.value(x));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&e| e <= T::ZERO) {
            return Err(Error::Eval("log of a non-positive value".into()));
        }
        let v = xv.map(T::ln);
        Ok(self.push(v, Op::Ln(x), &[x]))
    }

    pub fn gather(&mut self, x: Var, map: IndexMap) -> Result<Var> {
        let (index, dims) = map;
        let v = kernels::gather(self.value(x), &index, &dims)?;
        Ok(self.push(v, Op::Gather { x, index: Arc::new(index) }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(dims)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let map = kernels::index::permute(self.dims(x), axes)?;
        self.gather(x, map)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let map = kernels::index::pixel_shuffle(self.dims(x), r)?;
        self.gather(x, map)
    }

    pub fn depthwise_conv_down2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = kernels::depthwise_conv_down2(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::DepthwiseDown2 { x, w, b }, &[x, w, b]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        let v = kernels::upsample_bilinear(self.value(x), scale)?;
        Ok(self.push(v, Op::Bilinear { x, scale }, &[x]))
    }

    pub fn transposed_conv2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = kernels::transposed_conv2x2(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::TransConv { x, w, b }, &[x, w, b]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Concat(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::new(&[1], vec![self.value(x).sum()]).expect("scalar");
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `x @ w (+ b)` over the last axis of an arbitrary-rank `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let cin = *dims.last().unwrap();
        let rows = dims.iter().product::<usize>() / cin;
        let flat = self.reshape(x, &[rows, cin])?;
        let mut y = self.bmm(flat, w, false)?;
        if let Some(b) = b {
            y = self.add_suffix(y, b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.dims(y)[1];
        self.reshape(y, &out_dims)
    }

    /// Pointwise convolution of an `[H, W, Cin]` map.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.dims(x).len() != 3 {
            return Err(Error::shape("conv1x1", format!("expected [H, W, C], got {:?}", self.dims(x))));
        }
        self.linear(x, w, Some(b))
    }

    /// Runs the reverse pass from a scalar node. Parameters that do not reach
    /// the loss receive zero gradients. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Eval("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Rank(format!("loss must be scalar, got dims {:?}", self.dims(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&[1], T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (input, g) in adjoint::backprop(self, i, &dy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            if let Op::Param(_) = self.nodes[i].op {
                grads[i] = Some(dy);
            }
        }
        let mut map: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                match map.get_mut(name) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    None => {
                        map.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients { map })
    }
}
