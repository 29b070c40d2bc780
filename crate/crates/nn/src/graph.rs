//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. Gradients are only propagated into nodes
//! that (transitively) depend on a [`Graph::param`] leaf.

use crate::error::{shape_err, Result};
use crate::kernels::{self, BatchStats, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::{compensated_sum, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        spec: ConvSpec,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor<T>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: f64,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Resize {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
        channels: Vec<usize>,
    },
    Mse {
        f: NodeId,
        target: Tensor<T>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
    DotConst {
        x: NodeId,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the graph's parameter leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the leaf does not influence the differentiated scalar.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn batch_of(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1).max(1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let v = kernels::conv2d(self.value(x), self.value(w), spec)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(v, Op::Conv2d { x, w, spec }, rg))
    }

    /// Transposed convolution; `w` is `[in_channels, out_channels, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let v = kernels::conv_transpose2d(self.value(x), self.value(w), spec)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(v, Op::ConvTranspose2d { x, w, spec }, rg))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::add_channel_bias(self.value(x), self.value(b))?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = kernels::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu { x }, rg)
    }

    /// Batch norm with batch statistics. The returned statistics are meant
    /// for updating running estimates; the graph itself keeps none.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let r = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            r.output,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized: r.normalized,
                inv_std: r.inv_std,
            },
            rg,
        );
        Ok((id, r.stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let v = kernels::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                var: running_var.clone(),
                eps,
            },
            rg,
        ))
    }

    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = kernels::max_pool2x2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MaxPool { x, argmax }, rg))
    }

    pub fn resize_bilinear(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let v = kernels::resize_bilinear(self.value(x), h, w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Resize { x }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let v = kernels::concat_channels(&vals)?;
        let channels = vals.iter().map(|t| t.shape()[1]).collect();
        let rg = self.rg(xs);
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                channels,
            },
            rg,
        ))
    }

    /// `sum ||f_i - target_i||^2 / (2 B)` over a batch of `B` samples.
    pub fn mse(&mut self, f: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let fv = self.value(f);
        if fv.shape() != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", fv.shape(), target.shape())));
        }
        let b = batch_of(fv.shape()) as f64;
        let s = compensated_sum(
            fv.data()
                .iter()
                .zip(target.data())
                .map(|(a, t)| (a.as_f64() - t.as_f64()).powi(2)),
        );
        let v = Tensor::scalar(T::from_f64(s / (2.0 * b)));
        let rg = self.rg(&[f]);
        Ok(self.push(
            v,
            Op::Mse {
                f,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `sum_i c_i x_i` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let first = terms.first().ok_or_else(|| shape_err("weighted_sum", "no terms"))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut acc = vec![0.0f64; self.value(first.0).len()];
        for &(id, c) in terms {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return Err(shape_err("weighted_sum", format!("{:?} vs {shape:?}", v.shape())));
            }
            acc.iter_mut().zip(v.data()).for_each(|(a, x)| *a += c * x.as_f64());
        }
        let v = Tensor::new(shape, acc.into_iter().map(T::from_f64).collect())?;
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            v,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// `<x, weights>` as a scalar; reduces a tensor output for gradient checks.
    pub fn dot_const(&mut self, x: NodeId, weights: &Tensor<T>) -> Result<NodeId> {
        let s = self.value(x).dot(weights)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(s)),
            Op::DotConst {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let ones = Tensor::full(self.value(x).shape(), T::one());
        self.dot_const(x, &ones)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contribution) in self.local_grads(node, &g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient contributions of one node to each of its inputs that needs one.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let need = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, spec } => {
                let (dx, dw) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *spec, need(*x), need(*w))?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::ConvTranspose2d { x, w, spec } => {
                let (dx, dw) =
                    kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *spec, need(*x), need(*w))?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::AddBias { x, b } => {
                if need(*b) {
                    out.push((*b, kernels::channel_sums(g)?));
                }
                if need(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::Relu { x } => out.push((*x, kernels::relu_backward(self.value(*x), g))),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (dx, dg, db) = kernels::batch_norm_train_backward(g, normalized, self.value(*gamma), inv_std)?;
                for (id, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if need(id) {
                        out.push((id, d));
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (dx, dg, db) =
                    kernels::batch_norm_eval_backward(self.value(*x), g, self.value(*gamma), mean, var, *eps)?;
                for (id, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if need(id) {
                        out.push((id, d));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, kernels::max_pool2x2_backward(self.value(*x).shape(), argmax, g)));
            }
            Op::Resize { x } => out.push((*x, kernels::resize_bilinear_backward(self.value(*x).shape(), g)?)),
            Op::Concat { xs, channels } => {
                for (id, d) in xs.iter().zip(kernels::split_channels(g, channels)?) {
                    if need(*id) {
                        out.push((*id, d));
                    }
                }
            }
            Op::Mse { f, target } => {
                let fv = self.value(*f);
                let k = g.data()[0].as_f64() / batch_of(fv.shape()) as f64;
                let d = fv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, t)| T::from_f64(k * (a.as_f64() - t.as_f64())))
                    .collect();
                out.push((*f, Tensor::new(fv.shape().to_vec(), d)?));
            }
            Op::WeightedSum { terms } => {
                for &(id, c) in terms {
                    if need(id) {
                        out.push((id, g.map(|v| T::from_f64(c * v.as_f64()))));
                    }
                }
            }
            Op::DotConst { x, weights } => {
                let s = g.data()[0];
                out.push((*x, weights.map(|w| w * s)));
            }
        }
        Ok(out)
    }
}
