//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation of a forward pass. Node indices only
//! ever reference earlier nodes, so insertion order is a topological order
//! and [`Graph::backward`] is a single reverse sweep that visits each node
//! exactly once. Saved activations are `Arc`-shared tensors, so recording is
//! cheap. A graph is confined to one thread and is consumed by `backward`;
//! a second call without a fresh forward pass is an error.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::ops::{self, BnBatchStats, ConvParams};
use crate::tensor::{LabelMap, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Deconv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    MaxPool {
        x: usize,
        k: usize,
        stride: usize,
        pad: usize,
        argmax: Vec<u32>,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Pad {
        x: usize,
        ph: usize,
        pw: usize,
    },
    Crop {
        x: usize,
        y0: usize,
        x0: usize,
    },
    Resize {
        x: usize,
    },
    BnTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f32,
        stats: BnBatchStats,
    },
    BnEval {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f32,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    SoftmaxCe {
        x: usize,
        labels: Vec<LabelMap>,
        ignore: u8,
        count: usize,
    },
    /// Scalar `sum(coeffs * x)` with constant coefficients.
    WeightedSum {
        x: usize,
        coeffs: Tensor,
    },
    Sum {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient table returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if one was accumulated.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a tensor the loss is never differentiated against.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Register a tensor that should receive a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Value held by a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn op(&self, idx: usize) -> &Op {
        &self.nodes[idx].op
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let p = ConvParams::new(
            self.value(w).clone(),
            b.map(|bv| self.value(bv).clone()),
            stride,
            pad,
        )?;
        let y = ops::conv2d(self.value(x), &p)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        Ok(self.push(y, Op::Conv { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad }, rg))
    }

    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let p = ConvParams::new(
            self.value(w).clone(),
            b.map(|bv| self.value(bv).clone()),
            stride,
            pad,
        )?;
        let y = ops::transposed_conv2d(self.value(x), &p)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        Ok(self.push(y, Op::Deconv { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d(self.value(x), k, stride, pad)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaxPool { x: x.0, k, stride, pad, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Relu { x: x.0 }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn pad2d(&mut self, x: Var, ph: usize, pw: usize, value: f32) -> Var {
        let y = ops::pad2d(self.value(x), ph, pw, value);
        let rg = self.rg(x);
        self.push(y, Op::Pad { x: x.0, ph, pw }, rg)
    }

    pub fn crop2d(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let y = ops::crop2d(self.value(x), y0, x0, h, w)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Crop { x: x.0, y0, x0 }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(x), h, w)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Resize { x: x.0 }, rg))
    }

    /// Training-mode batch norm; also returns the batch statistics so the
    /// caller can fold them into running estimates.
    pub fn batch_norm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BnBatchStats)> {
        let (y, stats) = ops::batch_norm2d_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            y,
            Op::BnTrain { x: x.0, gamma: gamma.0, beta: beta.0, eps, stats: stats.clone() },
            rg,
        );
        Ok((v, stats))
    }

    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let y = ops::batch_norm2d_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            Op::BnEval { x: x.0, gamma: gamma.0, beta: beta.0, eps, mean: mean.to_vec(), var: var.to_vec() },
            rg,
        ))
    }

    /// Scalar mean softmax cross-entropy over non-ignored pixels.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: Vec<LabelMap>, ignore: u8) -> Result<Var> {
        let (loss, count) = ops::softmax_ce_loss(self.value(logits), &labels, ignore)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { x: logits.0, labels, ignore, count },
            rg,
        ))
    }

    /// Scalar dot product with a constant coefficient tensor.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Tensor) -> Result<Var> {
        if coeffs.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("coeffs shape {} != value shape {}", coeffs.shape(), self.value(x).shape()),
            ));
        }
        let dot: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&a, &b)| (a as f64) * (b as f64))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(dot as f32), Op::WeightedSum { x: x.0, coeffs }, rg))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Sum { x: x.0 }, rg)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: calling it a
    /// second time without a fresh forward pass is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::InvalidArg(
                "backward already called on this graph; run a fresh forward pass".into(),
            ));
        }
        self.backward_done = true;
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
        if !self.nodes[idx].requires_grad {
            return Ok(());
        }
        grads[idx] = Some(match grads[idx].take() {
            Some(prev) => ops::add(&prev, &g)?,
            None => g,
        });
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                if self.nodes[*x].requires_grad {
                    let xs = xv.shape();
                    let gx = ops::conv2d_input_grad(g, wv, *stride, *pad, (xs.h, xs.w), None)?;
                    self.accumulate(grads, *x, gx)?;
                }
                if self.nodes[*w].requires_grad {
                    let ks = wv.shape();
                    let gw = ops::conv2d_weight_grad(g, xv, *stride, *pad, (ks.h, ks.w))?;
                    self.accumulate(grads, *w, gw)?;
                }
                if let Some(b) = b {
                    if self.nodes[*b].requires_grad {
                        self.accumulate(grads, *b, ops::bias_grad(g))?;
                    }
                }
            }
            Op::Deconv { x, w, b, stride, pad } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                if self.nodes[*x].requires_grad {
                    // The adjoint of the adjoint is the forward convolution.
                    let p = ConvParams::new(wv.clone(), None, *stride, *pad)?;
                    let gx = ops::conv2d(g, &p)?;
                    self.accumulate(grads, *x, gx)?;
                }
                if self.nodes[*w].requires_grad {
                    let ks = wv.shape();
                    let gw = ops::conv2d_weight_grad(xv, g, *stride, *pad, (ks.h, ks.w))?;
                    self.accumulate(grads, *w, gw)?;
                }
                if let Some(b) = b {
                    if self.nodes[*b].requires_grad {
                        self.accumulate(grads, *b, ops::bias_grad(g))?;
                    }
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                let gx = ops::max_pool2d_backward(g, argmax, self.nodes[*x].value.shape());
                self.accumulate(grads, *x, gx)?;
            }
            Op::Relu { x } => {
                let gx = ops::relu_backward(g, &self.nodes[idx].value);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Pad { x, ph, pw } => {
                let xs = self.nodes[*x].value.shape();
                let gx = ops::crop2d(g, *ph, *pw, xs.h, xs.w)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Crop { x, y0, x0 } => {
                let gx = ops::crop2d_backward(g, self.nodes[*x].value.shape(), *y0, *x0);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Resize { x } => {
                let gx = ops::resize_bilinear_backward(g, self.nodes[*x].value.shape());
                self.accumulate(grads, *x, gx)?;
            }
            Op::BnTrain { x, gamma, beta, eps, stats } => {
                let (gx, ggamma, gbeta) =
                    ops::batch_norm2d_train_backward(g, &self.nodes[*x].value, &self.nodes[*gamma].value, stats, *eps);
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *gamma, ggamma)?;
                self.accumulate(grads, *beta, gbeta)?;
            }
            Op::BnEval { x, gamma, beta, eps, mean, var } => {
                let (gx, ggamma, gbeta) = ops::batch_norm2d_eval_backward(
                    g,
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    mean,
                    var,
                    *eps,
                );
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *gamma, ggamma)?;
                self.accumulate(grads, *beta, gbeta)?;
            }
            Op::SoftmaxCe { x, labels, ignore, count } => {
                let gx = ops::softmax_ce_loss_backward(&self.nodes[*x].value, labels, *ignore, *count, g.item());
                self.accumulate(grads, *x, gx)?;
            }
            Op::WeightedSum { x, coeffs } => {
                let s = g.item();
                let gx = coeffs.map(|c| c * s);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum { x } => {
                let gx = Tensor::full(self.nodes[*x].value.shape(), g.item());
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients against central differences
/// `(f(w + eps) - f(w - eps)) / (2 eps)` on sampled coordinates of every
/// parameter, and returns the worst relative error
/// `|a - n| / max(1, |a|, |n|)`.
///
/// `build` must construct the same loss graph for any parameter values.
/// `eps` must lie in `[1e-4, 1e-2]`, the usable window for 32-bit floats.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f32, coords_per_param: usize, seed: u64) -> Result<f32>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArg(format!("finite_diff_check: eps {eps} outside [1e-4, 1e-2]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::InvalidArg("finite_diff_check: loss must be scalar".into()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();

    let eval = |theta: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = theta.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item() as f64)
    };

    let mut rng = crate::rng::rng_from_seed(seed);
    let mut worst = 0.0f32;
    for (pi, base) in params.iter().enumerate() {
        let numel = base.numel();
        let coords: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, coords_per_param).into_vec()
        };
        for ci in coords {
            let mut theta: Vec<Tensor> = params.to_vec();
            let mut plus = base.to_vec();
            plus[ci] += eps;
            theta[pi] = Tensor::from_vec(base.shape(), plus)?;
            let lp = eval(&theta)?;
            let mut minus = base.to_vec();
            minus[ci] -= eps;
            theta[pi] = Tensor::from_vec(base.shape(), minus)?;
            let lm = eval(&theta)?;
            let numeric = ((lp - lm) / (2.0 * eps as f64)) as f32;
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Bounding box in input coordinates: `(y0, x0, y1, x1)`, inclusive.
pub type SupportBox = (usize, usize, usize, usize);

/// Exact input-support region of one spatial location of `target`: the set
/// of input pixels that can influence it, found by propagating index
/// intervals backward through the recorded graph (unions at forks). Returns
/// the box for the graph node `input`.
pub fn input_support(g: &Graph, target: Var, location: (usize, usize), input: Var) -> Option<SupportBox> {
    // Per-node interval, inclusive, in that node's own coordinates.
    let mut boxes: Vec<Option<(isize, isize, isize, isize)>> = vec![None; g.len()];
    boxes[target.0] = Some((location.0 as isize, location.1 as isize, location.0 as isize, location.1 as isize));

    let union = |cur: &mut Option<(isize, isize, isize, isize)>, b: (isize, isize, isize, isize)| {
        *cur = Some(match *cur {
            None => b,
            Some(c) => (c.0.min(b.0), c.1.min(b.1), c.2.max(b.2), c.3.max(b.3)),
        });
    };

    for idx in (0..=target.0).rev() {
        let Some(b) = boxes[idx] else { continue };
        let mut push = |parent: usize, nb: (isize, isize, isize, isize)| union(&mut boxes[parent], nb);
        match g.op(idx) {
            Op::Leaf => {}
            Op::Conv { x, w, stride, pad, .. } => {
                let ks = g.value(Var(*w)).shape();
                let nb = (
                    b.0 * stride.0 as isize - pad.0 as isize,
                    b.1 * stride.1 as isize - pad.1 as isize,
                    b.2 * stride.0 as isize - pad.0 as isize + ks.h as isize - 1,
                    b.3 * stride.1 as isize - pad.1 as isize + ks.w as isize - 1,
                );
                push(*x, nb);
            }
            Op::MaxPool { x, k, stride, pad, .. } => {
                let nb = (
                    b.0 * *stride as isize - *pad as isize,
                    b.1 * *stride as isize - *pad as isize,
                    b.2 * *stride as isize - *pad as isize + *k as isize - 1,
                    b.3 * *stride as isize - *pad as isize + *k as isize - 1,
                );
                push(*x, nb);
            }
            Op::Deconv { x, w, stride, pad, .. } => {
                // output o draws on inputs i with i*s - p + t = o, t in [0, k)
                let ks = g.value(Var(*w)).shape();
                let lo = |o: isize, p: usize, k: usize, s: usize| -> isize {
                    let n = o + p as isize - (k as isize - 1);
                    n.div_euclid(s as isize) + if n.rem_euclid(s as isize) != 0 { 1 } else { 0 }
                };
                let hi = |o: isize, p: usize, s: usize| -> isize { (o + p as isize).div_euclid(s as isize) };
                let nb = (
                    lo(b.0, pad.0, ks.h, stride.0),
                    lo(b.1, pad.1, ks.w, stride.1),
                    hi(b.2, pad.0, stride.0),
                    hi(b.3, pad.1, stride.1),
                );
                push(*x, nb);
            }
            Op::Relu { x } | Op::Resize { x } | Op::Sum { x } | Op::WeightedSum { x, .. } => {
                // Resize/Sum spread influence: be conservative and take the
                // parent's full extent.
                let xs = g.value(Var(*x)).shape();
                let nb = match g.op(idx) {
                    Op::Relu { .. } => b,
                    _ => (0, 0, xs.h as isize - 1, xs.w as isize - 1),
                };
                push(*x, nb);
            }
            Op::Add { a, b: bb } => {
                push(*a, b);
                push(*bb, b);
            }
            Op::Pad { x, ph, pw } => {
                push(*x, (b.0 - *ph as isize, b.1 - *pw as isize, b.2 - *ph as isize, b.3 - *pw as isize));
            }
            Op::Crop { x, y0, x0 } => {
                push(*x, (b.0 + *y0 as isize, b.1 + *x0 as isize, b.2 + *y0 as isize, b.3 + *x0 as isize));
            }
            Op::BnTrain { x, gamma, beta, .. } => {
                // Batch statistics couple every location; for support
                // purposes treat as elementwise (the VRF convention), but
                // gamma/beta paths do not carry spatial support.
                let _ = (gamma, beta);
                push(*x, b);
            }
            Op::BnEval { x, .. } => push(*x, b),
            Op::SoftmaxCe { x, .. } => {
                let xs = g.value(Var(*x)).shape();
                push(*x, (0, 0, xs.h as isize - 1, xs.w as isize - 1));
            }
        }
    }

    boxes[input.0].map(|b| {
        let s = g.value(input).shape();
        (
            b.0.max(0) as usize,
            b.1.max(0) as usize,
            (b.2.min(s.h as isize - 1)).max(0) as usize,
            (b.3.min(s.w as isize - 1)).max(0) as usize,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IGNORE_LABEL;
    use crate::testutil::rand_tensor;

    fn conv_relu_sum(g: &mut Graph, vars: &[Var]) -> Result<Var> {
        let x = g.constant(rand_tensor((1, 2, 5, 5), 900));
        let y = g.conv2d(x, vars[0], Some(vars[1]), (1, 1), (1, 1))?;
        let r = g.relu(y);
        Ok(g.sum(r))
    }

    #[test]
    fn conv_relu_sum_passes_gradient_check() {
        let w = rand_tensor((3, 2, 3, 3), 901);
        let b = rand_tensor((1, 3, 1, 1), 902);
        let err = finite_diff_check(conv_relu_sum, &[w, b], 1e-2, 40, 903).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let w = g.param(rand_tensor((1, 1, 1, 1), 1));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        let err = g.backward(loss).unwrap_err().to_string();
        assert!(err.contains("backward already called"), "got {err}");
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.param(rand_tensor((1, 1, 2, 2), 1));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn gradients_deterministic_across_runs() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(rand_tensor((1, 2, 6, 6), 77));
            let w = g.param(rand_tensor((3, 2, 3, 3), 78));
            let y = g.conv2d(x, w, None, (1, 1), (1, 1)).unwrap();
            let p = g.max_pool2d(y, 2, 2, 0).unwrap();
            let r = g.relu(p);
            let loss = g.sum(r);
            let grads = g.backward(loss).unwrap();
            grads.get(w).unwrap().clone()
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn deconv_gradient_check() {
        let build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let x = g.constant(rand_tensor((1, 3, 4, 4), 910));
            let y = g.transposed_conv2d(x, vars[0], Some(vars[1]), (2, 2), (1, 1))?;
            let coeffs = rand_tensor(y_shape_of(g, y), 912);
            g.weighted_sum(y, coeffs)
        };
        let w = rand_tensor((3, 2, 4, 4), 911);
        let b = rand_tensor((1, 2, 1, 1), 913);
        let err = finite_diff_check(build, &[w, b], 1e-2, 40, 914).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn bn_train_gradient_check() {
        let build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let x = g.constant(rand_tensor((2, 3, 4, 4), 920));
            let y = g.conv2d(x, vars[0], None, (1, 1), (1, 1))?;
            let (z, _) = g.batch_norm2d_train(y, vars[1], vars[2], 1e-5)?;
            let r = g.relu(z);
            Ok(g.sum(r))
        };
        let w = rand_tensor((3, 3, 3, 3), 921);
        let gamma = rand_tensor((1, 3, 1, 1), 922).map(|v| 1.0 + 0.3 * v);
        let beta = rand_tensor((1, 3, 1, 1), 923);
        let err = finite_diff_check(build, &[w, gamma, beta], 1e-2, 40, 924).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn softmax_ce_gradient_check() {
        let labels = vec![LabelMap::new(3, 3, vec![0, 1, 2, IGNORE_LABEL, 1, 0, 2, 2, 1]).unwrap()];
        let build = move |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let x = g.constant(rand_tensor((1, 2, 3, 3), 930));
            let y = g.conv2d(x, vars[0], None, (1, 1), (1, 1))?;
            g.softmax_ce_loss(y, labels.clone(), IGNORE_LABEL)
        };
        let w = rand_tensor((3, 2, 3, 3), 931);
        let err = finite_diff_check(build, &[w], 1e-2, 60, 932).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn support_box_of_two_convs() {
        // Two stacked 3x3 convs: RF 5x5 around the probe.
        let mut g = Graph::new();
        let x = g.param(rand_tensor((1, 1, 12, 12), 940));
        let w1 = g.constant(rand_tensor((1, 1, 3, 3), 941));
        let w2 = g.constant(rand_tensor((1, 1, 3, 3), 942));
        let y1 = g.conv2d(x, w1, None, (1, 1), (1, 1)).unwrap();
        let y2 = g.conv2d(y1, w2, None, (1, 1), (1, 1)).unwrap();
        let b = input_support(&g, y2, (6, 6), x).unwrap();
        assert_eq!(b, (4, 4, 8, 8));
        // Clipped at the border.
        let b = input_support(&g, y2, (0, 1), x).unwrap();
        assert_eq!(b, (0, 0, 2, 3));
    }

    fn y_shape_of(g: &Graph, v: Var) -> crate::tensor::Shape {
        g.value(v).shape()
    }
}
