use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::Activation;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ScalarOp {
    Add,
    Mul,
    Div,
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, cols: Vec<T> },
    MaxPool { input: Var, argmax: Vec<usize> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormFrozen { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Activation { input: Var, kind: Activation },
    Affine { input: Var, scale: T },
    ScalarBinary { input: Var, scalar: Var, kind: ScalarOp },
    Mul { lhs: Var, rhs: Var },
    Sqrt { input: Var },
    SumAll { input: Var },
    Reshape { input: Var },
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    BroadcastCols { input: Var },
    SegmentSum { input: Var, groups: Vec<usize> },
    SegmentWeightedMean { points: Var, weights: Var, groups: Vec<usize>, totals: Vec<T> },
    WeightedSqDistance { query: Var, centroids: Var, weights: Var },
    CosineDistance { query: Var, centroids: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

pub(crate) struct Node<T: Element> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation so it can be replayed backwards.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the computation graph. Intermediates needed by the
/// backward pass are only kept when some input requires a gradient.
pub struct Tape<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a trainable value. The tensor data is copied onto the tape.
    pub fn parameter(&mut self, param: &Tensor<T>) -> Var {
        let value = Tensor::new(param.shape().to_vec(), param.data().to_vec())
            .expect("parameter tensor is already well formed");
        self.push_leaf(value, true)
    }

    /// Records an owned trainable value.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        value.check_finite(op_name)?;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns gradients for every leaf that requires one. Fan-out is
    /// handled by additive accumulation.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink { tape: self, grads: &mut grads };
            self.backward_node(node, &g, &mut sink);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) {
        use super::{loss, metric, nn, pointwise, shape};
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, cols } => {
                nn::conv2d_backward(self, node, *input, *kernel, *bias, cols, g, sink)
            }
            Op::MaxPool { input, argmax } => nn::maxpool_backward(*input, argmax, g, sink),
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                nn::batchnorm_backward(self, *input, *gamma, *beta, xhat, inv_std, g, sink)
            }
            Op::BatchNormFrozen { input, gamma, beta, xhat, inv_std } => {
                nn::batchnorm_frozen_backward(self, *input, *gamma, *beta, xhat, inv_std, g, sink)
            }
            Op::Activation { input, kind } => {
                pointwise::activation_backward(self, node, *input, *kind, g, sink)
            }
            Op::Affine { input, scale } => pointwise::affine_backward(*input, *scale, g, sink),
            Op::ScalarBinary { input, scalar, kind } => {
                pointwise::scalar_binary_backward(self, *input, *scalar, *kind, g, sink)
            }
            Op::Mul { lhs, rhs } => pointwise::mul_backward(self, *lhs, *rhs, g, sink),
            Op::Sqrt { input } => pointwise::sqrt_backward(node, *input, g, sink),
            Op::SumAll { input } => pointwise::sum_backward(*input, g, sink),
            Op::Reshape { input } => sink.add(*input, |acc| add_into(acc, g)),
            Op::SliceCols { input, start } => {
                shape::slice_cols_backward(self, node, *input, *start, g, sink)
            }
            Op::GatherRows { input, rows } => {
                shape::gather_rows_backward(self, *input, rows, g, sink)
            }
            Op::BroadcastCols { input } => shape::broadcast_cols_backward(node, *input, g, sink),
            Op::SegmentSum { input, groups } => {
                metric::segment_sum_backward(self, *input, groups, g, sink)
            }
            Op::SegmentWeightedMean { points, weights, groups, totals } => {
                metric::segment_weighted_mean_backward(
                    self, node, *points, *weights, groups, totals, g, sink,
                )
            }
            Op::WeightedSqDistance { query, centroids, weights } => {
                metric::weighted_sq_distance_backward(self, *query, *centroids, *weights, g, sink)
            }
            Op::CosineDistance { query, centroids } => {
                metric::cosine_distance_backward(self, *query, *centroids, g, sink)
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                loss::softmax_cross_entropy_backward(*logits, labels, probs, g, sink)
            }
        }
    }
}

pub(crate) fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
}

/// Accumulates input gradients during the backward sweep, skipping inputs
/// that do not require one.
pub(crate) struct GradSink<'a, T: Element> {
    tape: &'a Tape<T>,
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Element> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    pub(crate) fn add(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let len = self.tape.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s gradient slot. Variables
    /// that did not influence the loss contribute zeros.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![T::zero(); target.len()]),
        }
    }
}
