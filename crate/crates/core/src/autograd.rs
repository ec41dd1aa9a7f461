//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the record in exact reverse order, summing the
//! contributions of every consumer into each node's gradient. A fresh graph is
//! built for each forward pass; training and Grad-CAM share the mechanism.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Conv2dParams, NormStats};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, params: Conv2dParams },
    Depthwise { x: Var, w: Var, params: Conv2dParams },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: NormStats, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    AvgPool { x: Var, kernel: usize, stride: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Concat(Vec<(Var, usize)>),
    Slice { x: Var, start: usize },
    Add(Var, Var),
    Mul(Var, Var),
    ChannelScale { x: Var, s: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum(Var),
    WeightedSum { x: Var, weights: Tensor<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Focal { logits: Var, targets: Vec<usize>, probs: Vec<f64>, gamma: f64, alpha: Vec<f64> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
}

/// Operation record for one forward pass.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`] for leaf variables and
/// explicitly retained nodes.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, retain: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Keeps the gradient of an intermediate node so it can be read after
    /// [`Graph::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, retain: false });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, params: Conv2dParams) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), params)?;
        Ok(self.push(y, Op::Conv2d { x, w, params }, &[x, w]))
    }

    /// 1×1 convolution, recorded as a stride-1 unpadded [`Graph::conv2d`].
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [_, _, kh, kw] = self.value(w).dims4("pointwise kernel")?;
        if kh != 1 || kw != 1 {
            return Err(Error::shape(format!("pointwise kernel must be 1×1, got {:?}", self.value(w).shape())));
        }
        self.conv2d(x, w, Conv2dParams::new(1, 0))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, params: Conv2dParams) -> Result<Var> {
        let y = kernels::depthwise_conv2d(self.value(x), self.value(w), params)?;
        Ok(self.push(y, Op::Depthwise { x, w, params }, &[x, w]))
    }

    /// Batch norm using the batch's own statistics. Returns the output and
    /// the statistics so the caller can update running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, NormStats)> {
        let (y, stats) = kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, stats: stats.clone(), batch_stats: true }, &[x, gamma, beta]);
        Ok((out, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (y, stats) =
            kernels::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var, eps)?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, stats, batch_stats: false }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::cast(sigmoid(v.widen())));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = kernels::softmax(self.value(x));
        self.push(y, Op::Softmax(x), &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let y = kernels::avg_pool2d(self.value(x), kernel, stride)?;
        Ok(self.push(y, Op::AvgPool { x, kernel, stride }, &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = kernels::max_pool2d(self.value(x), kernel, stride, padding)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn channel_concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = kernels::channel_concat(&tensors)?;
        let record = parts.iter().map(|&v| (v, self.value(v).shape()[1])).collect();
        Ok(self.push(y, Op::Concat(record), parts))
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::channel_slice(self.value(x), start, len)?;
        Ok(self.push(y, Op::Slice { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("{what}: shapes {:?} and {:?} differ", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    /// Multiplies each channel plane of `x: [N,C,H,W]` by `s: [N,C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = kernels::channel_scale(self.value(x), self.value(s))?;
        Ok(self.push(y, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(T::cast(self.value(x).sum()));
        self.push(y, Op::Sum(x), &[x])
    }

    /// `Σ x ⊙ weights` as a `[1]` tensor; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != weights.shape() {
            return Err(Error::shape(format!("weighted_sum: shapes {:?} and {:?} differ", tx.shape(), weights.shape())));
        }
        let s: f64 = tx.data().iter().zip(weights.data()).map(|(a, b)| a.widen() * b.widen()).sum();
        Ok(self.push(Tensor::scalar(T::cast(s)), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Mean cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = crate::loss::cross_entropy_forward(self.value(logits), targets)?;
        let y = Tensor::scalar(T::cast(loss));
        Ok(self.push(y, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Mean focal loss `−α_y (1 − p_y)^γ log p_y` over the batch.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64, alpha: &[f64]) -> Result<Var> {
        let (loss, probs) = crate::loss::focal_forward(self.value(logits), targets, gamma, alpha)?;
        let y = Tensor::scalar(T::cast(loss));
        let op = Op::Focal { logits, targets: targets.to_vec(), probs, gamma, alpha: alpha.to_vec() };
        Ok(self.push(y, op, &[logits]))
    }

    /// Propagates gradients from a scalar output back through the record.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut kept: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        kept.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.retain {
                kept[i] = Some(g.clone());
            }
            for (input, contribution) in self.input_grads(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
        }
        Ok(Gradients { grads: kept })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, params } => {
                let (dx, dw) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *params, self.wants(*x), self.wants(*w))?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::Depthwise { x, w, params } => {
                let (dx, dw) = kernels::depthwise_conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *params,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::BatchNorm { x, gamma, beta, stats, batch_stats } => {
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(self.value(*x), self.value(*gamma), g, stats, *batch_stats)?;
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&yv, &gv)| if yv > T::zero() { gv } else { T::zero() });
                out.push((*x, Tensor::from_vec(y.shape(), data.collect())?));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&yv, &gv)| {
                    let s = yv.widen();
                    T::cast(gv.widen() * s * (1.0 - s))
                });
                out.push((*x, Tensor::from_vec(y.shape(), data.collect())?));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let k = *y.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.widen() * b.widen()).sum();
                    dx.extend(yr.iter().zip(gr).map(|(a, b)| T::cast(a.widen() * (b.widen() - dot))));
                }
                out.push((*x, Tensor::from_vec(y.shape(), dx)?));
            }
            Op::AvgPool { x, kernel, stride } => {
                out.push((*x, kernels::avg_pool2d_backward(self.value(*x).shape(), g, *kernel, *stride)?));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, kernels::max_pool2d_backward(self.value(*x).shape(), g, argmax)?));
            }
            Op::GlobalAvgPool(x) => {
                out.push((*x, kernels::global_avg_pool_backward(self.value(*x).shape(), g)?));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &(v, c) in parts {
                    if self.wants(v) {
                        out.push((v, kernels::channel_slice(g, start, c)?));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let src = self.value(*x);
                let (n, c) = (src.shape()[0], src.shape()[1]);
                let len = g.shape()[1];
                let inner: usize = src.shape()[2..].iter().product();
                let mut dx = vec![T::zero(); src.numel()];
                for ni in 0..n {
                    dx[(ni * c + start) * inner..][..len * inner].copy_from_slice(&g.data()[ni * len * inner..][..len * inner]);
                }
                out.push((*x, Tensor::from_vec(src.shape(), dx)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = tb.data().iter().zip(g.data()).map(|(&v, &gv)| v * gv).collect();
                let db = ta.data().iter().zip(g.data()).map(|(&v, &gv)| v * gv).collect();
                out.push((*a, Tensor::from_vec(ta.shape(), da)?));
                out.push((*b, Tensor::from_vec(tb.shape(), db)?));
            }
            Op::ChannelScale { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                if self.wants(*x) {
                    out.push((*x, kernels::channel_scale(g, ts)?));
                }
                if self.wants(*s) {
                    let p = tx.shape()[2] * tx.shape()[3];
                    let ds = tx
                        .data()
                        .chunks(p)
                        .zip(g.data().chunks(p))
                        .map(|(xp, gp)| T::cast(xp.iter().zip(gp).map(|(a, b)| a.widen() * b.widen()).sum()))
                        .collect();
                    out.push((*s, Tensor::from_vec(ts.shape(), ds)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    out.push((*x, kernels::linear_backward_input(g, tw)?));
                }
                if self.wants(*w) {
                    out.push((*w, kernels::linear_backward_weight(g, tx)?));
                }
                if let Some(b) = b {
                    let d_out = tw.shape()[0];
                    let mut db = vec![0.0f64; d_out];
                    for row in g.data().chunks(d_out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v.widen();
                        }
                    }
                    out.push((*b, Tensor::from_vec(&[d_out], db.into_iter().map(T::cast).collect())?));
                }
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                out.push((*x, weights.map(|w| w * gv)));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let d = crate::loss::cross_entropy_grad(probs, targets, g.data()[0].widen());
                out.push((*logits, Tensor::from_vec(self.value(*logits).shape(), d.into_iter().map(T::cast).collect())?));
            }
            Op::Focal { logits, targets, probs, gamma, alpha } => {
                let d = crate::loss::focal_grad(probs, targets, *gamma, alpha, g.data()[0].widen());
                out.push((*logits, Tensor::from_vec(self.value(*logits).shape(), d.into_iter().map(T::cast).collect())?));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
