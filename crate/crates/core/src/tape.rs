//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes appended in evaluation order, so node
//! indices are already a topological order. Operations are methods on the tape
//! (see the `ops` module) that compute their value eagerly and record enough
//! state for [`Tape::backward`] to apply the chain rule in reverse.
//!
//! A tape is built for one forward pass and consumed by one backward pass.

use crate::error::{Error, Result};
use crate::ops::{conv, dense, loss, shape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<T>,
        geom: conv::ConvGeom,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    L1(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    SampledNce {
        logits: Var,
        rows: Vec<loss::NceRow>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | L1(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Sum(a) | Mean(a) | Reshape(a) | Softmax(a) => vec![*a],
            MatMul { a, b, .. } => vec![*a, *b],
            Linear { x, weight, bias } => vec![*x, *weight, *bias],
            LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Conv2d {
                x, kernel, bias, ..
            } => vec![*x, *kernel, *bias],
            Gather { x, .. } | NormalizeRows { x, .. } => vec![*x],
            ConcatCols(parts) => parts.clone(),
            SampledNce { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mutable view of the gradient buffers handed to per-op backward rules.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulation buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_node(tensor.detached(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor.detached(), Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor.detached(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Leaves that require a gradient but were not reached report zeros;
    /// interior nodes report `None` because their buffers are released.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, filling gradients for every
    /// leaf that requires one. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backward_node(&node.op, &node.value, &g, &mut sink);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn backward_node<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = sink.slot(v) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
            if let Some(s) = sink.slot(*b) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (sink.value(*a), sink.value(*b));
            if let Some(s) = sink.slot(*a) {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(bv.data()) {
                    *s += g * y;
                }
            }
            if let Some(s) = sink.slot(*b) {
                for ((s, &g), &x) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g * x;
                }
            }
        }
        Op::Scale(a, k) => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *k);
            }
        }
        Op::Relu(a) => {
            let x = sink.value(*a);
            if let Some(s) = sink.slot(*a) {
                for ((s, &g), &x) in s.iter_mut().zip(g).zip(x.data()) {
                    if x > T::zero() {
                        *s += g;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = sink.slot(*a) {
                let k = g[0] / T::of(s.len() as f64);
                s.iter_mut().for_each(|s| *s += k);
            }
        }
        Op::Reshape(a) => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
        }
        Op::MatMul { a, b, trans_b } => dense::matmul_backward(*a, *b, *trans_b, g, sink),
        Op::Linear { x, weight, bias } => dense::linear_backward(*x, *weight, *bias, g, sink),
        Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            inv_std,
        } => dense::layernorm_backward(*x, *gain, *shift, xhat, inv_std, g, sink),
        Op::Softmax(a) => dense::softmax_backward(*a, out, g, sink),
        Op::Conv2d {
            x,
            kernel,
            bias,
            cols,
            geom,
        } => conv::conv2d_backward(*x, *kernel, *bias, cols, geom, g, sink),
        Op::Gather { x, index } => shape::gather_backward(*x, index, g, sink),
        Op::ConcatCols(parts) => shape::concat_cols_backward(parts, out, g, sink),
        Op::L1(a, b) => loss::l1_backward(*a, *b, g, sink),
        Op::NormalizeRows { x, norms } => loss::normalize_rows_backward(*x, out, norms, g, sink),
        Op::SampledNce { logits, rows } => loss::sampled_nce_backward(*logits, rows, g, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::full(&[2], 1.5));
        let y = tape.variable(Tensor::full(&[3], 2.0));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_a_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::full(&[2], 1.0));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::full(&[2], 1.0));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x + x) -> df/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -1.0]);
    }
}
