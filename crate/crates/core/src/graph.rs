//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] simply walks it in reverse, visiting each
//! node once. Gradients of a node consumed by several operations accumulate.

use crate::error::{Error, Result};
use crate::tensor::{
    self, channel_sum, conv2d_backward, conv2d_from_cols, im2col, ConvGeometry, LayerNormCache,
    LayerNormLayout, Tensor,
};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    ChannelBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
        cols: Vec<f32>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        layout: LayerNormLayout,
        cache: LayerNormCache,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Sums a non-empty list of same-shaped terms left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of zero terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Adds a per-channel `[C]` bias to `[N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_channel_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::ChannelBias(x, bias), rg))
    }

    /// Same-padded stride-1 convolution of a batched `[N, C_in, H, W]` input.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let geometry = ConvGeometry::check(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let cols = im2col(self.value(input), &geometry);
        let value = conv2d_from_cols(&cols, self.value(weight), bias.map(|b| self.value(b)), &geometry);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            rg,
        ))
    }

    /// Layer normalization with one statistic per sample and channel group.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, groups: usize, eps: f32) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let layout = LayerNormLayout::check(self.value(input), self.value(gain), self.value(bias), groups)?;
        let (value, cache) = tensor::layer_norm_forward(
            self.value(input),
            self.value(gain),
            self.value(bias),
            &layout,
            eps,
        );
        let rg = self.rg(&[input, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                bias,
                layout,
                cache,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Joins `[N, C_a, H, W]` and `[N, C_b, H, W]` into `[N, C_a + C_b, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b], 1)
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow(axis, start, len)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Narrow { input, axis, start }, rg))
    }

    /// Splits `axis` into consecutive pieces of `len` each.
    pub fn split(&mut self, input: Var, axis: usize, len: usize, count: usize) -> Result<Vec<Var>> {
        (0..count).map(|i| self.narrow(input, axis, i * len, len)).collect()
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.accumulate(loss, Tensor::ones(&shape));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor) -> Result<()> {
        // Temporarily detach the op so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.propagate_op(idx, &op, grad);
        self.nodes[idx].op = op;
        result
    }

    fn propagate_op(&mut self, idx: usize, op: &Op, grad: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let ga = grad.mul(self.value(b))?;
                    self.accumulate(a, ga);
                }
                if self.requires_grad(b) {
                    let gb = grad.mul(self.value(a))?;
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, factor) => self.accumulate(a, grad.scale(factor)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let g = grad.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?;
                self.accumulate(a, g);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let g = grad.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?;
                self.accumulate(a, g);
            }
            Op::ChannelBias(x, bias) => {
                self.accumulate(x, grad.clone());
                if self.requires_grad(bias) {
                    self.accumulate(bias, channel_sum(grad));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ref geometry,
                ref cols,
            } => {
                let want = (
                    self.requires_grad(input),
                    self.requires_grad(weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let grads = conv2d_backward(grad, cols, self.value(weight), geometry, want);
                if let Some(g) = grads.input {
                    self.accumulate(input, g);
                }
                if let Some(g) = grads.weight {
                    self.accumulate(weight, g);
                }
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    self.accumulate(b, g);
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                ref layout,
                ref cache,
            } => {
                let (dx, dgain, dbias) = tensor::layer_norm_backward(grad, self.value(gain), cache, layout);
                self.accumulate(input, dx);
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
            }
            Op::Concat { ref parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[axis];
                    if self.requires_grad(p) {
                        let g = grad.narrow(axis, start, len)?;
                        self.accumulate(p, g);
                    }
                    start += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                if self.requires_grad(input) {
                    let full = self.value(input).shape().to_vec();
                    let len = grad.shape()[axis];
                    let mut pieces = Vec::with_capacity(3);
                    let before = (start > 0).then(|| {
                        let mut s = full.clone();
                        s[axis] = start;
                        Tensor::zeros(&s)
                    });
                    let after = (start + len < full[axis]).then(|| {
                        let mut s = full.clone();
                        s[axis] = full[axis] - start - len;
                        Tensor::zeros(&s)
                    });
                    pieces.extend(before.as_ref());
                    pieces.push(grad);
                    pieces.extend(after.as_ref());
                    let g = Tensor::concat(&pieces, axis)?;
                    self.accumulate(input, g);
                }
            }
            Op::Sum(a) => {
                let g = grad.data()[0];
                let shape = self.value(a).shape().to_vec();
                self.accumulate(a, Tensor::full(&shape, g));
            }
        }
        Ok(())
    }
}
