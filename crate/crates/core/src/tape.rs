//! Reverse-mode differentiation over a linear tape.
//!
//! Every method on [`Tape`] runs a forward kernel immediately, stores the
//! result, and records what is needed to run the matching backward kernel.
//! A tape is single use: [`Tape::backward`] consumes its recorded state and a
//! second call fails. Build a new tape for every forward pass.

use crate::error::{Error, Result};
use crate::frontend::{bump_mean, l1_norms, quantize_ternary, BumpSpec};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernels: Var, pad: usize },
    ChannelBias { input: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    Affine { input: Var, weights: Var, bias: Var },
    Reshape { input: Var },
    L1Norms { filters: Var },
    DivChannels { input: Var, norms: Var },
    Ternary { input: Var, identity_grad: bool },
    BumpMean { input: Var, spec: BumpSpec },
    CrossEntropy { logits: Var, grad: Tensor, scale: f64 },
    Sum { input: Var },
    Dot { input: Var, weights: Tensor },
    Add { lhs: Var, rhs: Var, rhs_scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of [`Tape::backward`]: gradients of the loss with respect to leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss or was recorded without gradient tracking.
    pub fn get(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Records an input. Gradients are only propagated toward leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernels), pad)?;
        let ng = self.needs(input) || self.needs(kernels);
        Ok(self.push(out, Op::Conv2d { input, kernels, pad }, ng))
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias { input, bias }, ng))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, ng))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let ng = self.needs(input);
        self.push(out, Op::Relu { input }, ng)
    }

    pub fn affine(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::affine(self.value(input), self.value(weights), self.value(bias))?;
        let ng = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(out, Op::Affine { input, weights, bias }, ng))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::Reshape { input }, ng))
    }

    /// Per-filter l1 norms of `[K, ...]` filters.
    pub fn l1_norms(&mut self, filters: Var) -> Result<Var> {
        let out = l1_norms(self.value(filters))?;
        let ng = self.needs(filters);
        Ok(self.push(out, Op::L1Norms { filters }, ng))
    }

    /// Divides channel `k` of a `[N,K,H,W]` or `[K,H,W]` tensor by `norms[k]`.
    pub fn div_channels(&mut self, input: Var, norms: Var) -> Result<Var> {
        let x = self.value(input);
        let n = self.value(norms);
        let k = ops::channel_count(x)?;
        if n.shape() != [k] {
            return Err(Error::shape("div_channels", x.shape(), n.shape()));
        }
        let plane = ops::plane_len(x);
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let d = n.data()[i % k];
            chunk.iter_mut().for_each(|v| *v /= d);
        }
        let ng = self.needs(input) || self.needs(norms);
        Ok(self.push(out, Op::DivChannels { input, norms }, ng))
    }

    /// Ternary quantizer with thresholds `±threshold`. The backward pass is
    /// the true (almost-everywhere zero) derivative, or the identity when
    /// `identity_grad` is set.
    pub fn ternary(&mut self, input: Var, threshold: f64, identity_grad: bool) -> Var {
        let out = self.value(input).map(|v| quantize_ternary(v, threshold));
        let ng = self.needs(input);
        self.push(out, Op::Ternary { input, identity_grad }, ng)
    }

    /// Scalar mean of the bump penalty over all elements of `input`.
    pub fn bump_mean(&mut self, input: Var, spec: BumpSpec) -> Var {
        let mean = bump_mean(self.value(input), &spec);
        let ng = self.needs(input);
        self.push(Tensor::scalar(mean), Op::BumpMean { input, spec }, ng)
    }

    /// Softmax cross entropy of `[N,M]` logits. Returns the reduced scalar and
    /// the per-sample losses.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<(Var, Vec<f64>)> {
        let (losses, grad) = ops::softmax_cross_entropy_batch(self.value(logits), labels)?;
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / labels.len() as f64,
        };
        let total = losses.iter().sum::<f64>() * scale;
        let ng = self.needs(logits);
        let var = self.push(Tensor::scalar(total), Op::CrossEntropy { logits, grad, scale }, ng);
        Ok((var, losses))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let ng = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, ng)
    }

    /// `Σ weights ⊙ input` against a constant weight tensor.
    pub fn dot(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::shape("dot", x.shape(), weights.shape()));
        }
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }, ng))
    }

    /// `lhs + rhs_scale · rhs` for equally shaped values.
    pub fn add_scaled(&mut self, lhs: Var, rhs: Var, rhs_scale: f64) -> Result<Var> {
        let mut out = self.value(lhs).clone();
        out.add_scaled(self.value(rhs), rhs_scale)?;
        let ng = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, Op::Add { lhs, rhs, rhs_scale }, ng))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        self.consumed = true;
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&shapes[loss.0], 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            for (var, contrib) in contributions {
                accumulate(&mut grads[var.0], contrib)?;
            }
            // only leaf gradients are returned
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, pad } => {
                let (dx, dk) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernels),
                    *pad,
                    g,
                    self.needs(*input),
                    self.needs(*kernels),
                )?;
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernels, d)));
            }
            Op::ChannelBias { input, bias } => {
                if self.needs(*bias) {
                    let channels = self.value(*bias).len();
                    out.push((*bias, ops::channel_bias_backward(g, channels)));
                }
                if self.needs(*input) {
                    out.push((*input, g.clone()));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                out.push((*input, ops::maxpool2_backward(self.value(*input).shape(), argmax, g)?));
            }
            Op::Relu { input } => {
                out.push((*input, ops::relu_backward(self.value(*input), g)));
            }
            Op::Affine { input, weights, bias } => {
                let want = [self.needs(*input), self.needs(*weights), self.needs(*bias)];
                let [dx, dw, db] =
                    ops::affine_backward(self.value(*input), self.value(*weights), self.value(*bias), g, want)?;
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weights, d)));
                out.extend(db.map(|d| (*bias, d)));
            }
            Op::Reshape { input } => {
                out.push((*input, g.clone().reshape(self.value(*input).shape())?));
            }
            Op::L1Norms { filters } => {
                let w = self.value(*filters);
                let k = g.len();
                let per = w.len() / k;
                let data = w
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let s = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g.data()[i / per] * s
                    })
                    .collect();
                out.push((*filters, Tensor::new(w.shape().to_vec(), data)?));
            }
            Op::DivChannels { input, norms } => {
                let x = self.value(*input);
                let n = self.value(*norms).data();
                let k = n.len();
                let plane = ops::plane_len(x);
                if self.needs(*input) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_exact_mut(plane).enumerate() {
                        let d = n[i % k];
                        chunk.iter_mut().for_each(|v| *v /= d);
                    }
                    out.push((*input, dx));
                }
                if self.needs(*norms) {
                    let mut dn = vec![0.0; k];
                    for (i, (gc, xc)) in g
                        .data()
                        .chunks_exact(plane)
                        .zip(x.data().chunks_exact(plane))
                        .enumerate()
                    {
                        let c = i % k;
                        let dot: f64 = gc.iter().zip(xc).map(|(a, b)| a * b).sum();
                        dn[c] -= dot / (n[c] * n[c]);
                    }
                    out.push((*norms, Tensor::new(vec![k], dn)?));
                }
            }
            Op::Ternary { input, identity_grad } => {
                let d = if *identity_grad {
                    g.clone()
                } else {
                    Tensor::zeros(g.shape())
                };
                out.push((*input, d));
            }
            Op::BumpMean { input, spec } => {
                let x = self.value(*input);
                let scale = g.data()[0] / x.len() as f64;
                out.push((*input, x.map(|v| scale * spec.derivative(v))));
            }
            Op::CrossEntropy { logits, grad, scale } => {
                let s = g.data()[0] * scale;
                out.push((*logits, grad.map(|v| v * s)));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.value(*input).shape(), g.data()[0])));
            }
            Op::Dot { input, weights } => {
                let s = g.data()[0];
                out.push((*input, weights.map(|v| v * s)));
            }
            Op::Add { lhs, rhs, rhs_scale } => {
                if self.needs(*lhs) {
                    out.push((*lhs, g.clone()));
                }
                if self.needs(*rhs) {
                    out.push((*rhs, g.map(|v| v * rhs_scale)));
                }
            }
        }
        Ok(out.into_iter().filter(|(v, _)| self.needs(*v)).collect())
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_scaled(&contrib, 1.0),
        None => {
            *slot = Some(contrib);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn dot_gradient_is_weights() {
        let w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 7.0), true);
        let l = tape.dot(x, w.clone()).unwrap();
        assert_eq!(tape.value(l).data(), &[10.5]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x), w);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let unused = tape.leaf(Tensor::full(&[4], 1.0), true);
        let frozen = tape.leaf(Tensor::full(&[2], 3.0), false);
        let y = tape.add_scaled(x, frozen, 2.0).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[4]));
        assert_eq!(g.get(frozen), Tensor::zeros(&[2]));
        assert_eq!(g.get(x), Tensor::full(&[2], 1.0));
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn ternary_gradient_modes() {
        for (identity, expected) in [(false, 0.0), (true, 1.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![3], vec![-0.7, 0.1, 0.9]).unwrap(), true);
            let q = tape.ternary(x, 0.5, identity);
            assert_eq!(tape.value(q).data(), &[-1.0, 0.0, 1.0]);
            let s = tape.sum(q);
            let g = tape.backward(s).unwrap();
            assert!(g.get(x).data().iter().all(|&v| v == expected));
        }
    }
}
