//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every training step. Leaves are created
//! with [`Graph::param`] (tracked) or [`Graph::constant`] (untracked); every
//! op appends a node whose inputs already exist, so node order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Ops never broadcast. Each op documents the exact shapes it accepts and
//! fails with [`Error::Shape`] naming itself and the offending shapes.
//!
//! A graph supports exactly one backward pass; a second call returns
//! [`Error::BackwardTwice`]. Variables carry the id of the graph that made
//! them, and handing one to another graph returns [`Error::StaleVar`].

mod backward;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use ops::Segment;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Relu(usize),
    Log(usize),
    Exp(usize),
    Powf(usize, T),
    Softmax { x: usize, axis: Axis },
    LogSoftmax { x: usize, axis: Axis },
    LogSoftmaxMasked { x: usize, keep: Vec<bool> },
    Gather { x: usize, idx: Vec<usize> },
    SumAxis { x: usize, axis: Axis },
    MeanAxis { x: usize, axis: Axis },
    SumAll(usize),
    MeanAll(usize),
    MaskApply { x: usize, mask: Vec<T> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: usize, ids: Vec<usize> },
    Attention { q: usize, k: usize, v: usize, segments: Vec<Segment>, heads: usize, probs: Vec<T> },
    SegmentMean { x: usize, segments: Vec<Segment> },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
}

/// `[outer, len, inner]` factorisation of a shape around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize, op: &'static str) -> Result<Axis> {
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn at(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
}

/// Computation tape: an append-only list of nodes plus their gradient rules.
pub struct Graph<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `x`'s value into a fresh untracked leaf.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.clone();
        Ok(self.constant(v))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::StaleVar {
                var_graph: v.graph,
                graph: self.id,
            });
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Gradient accumulated by [`Graph::backward`] for a leaf; `None` for
    /// untracked leaves, leaves the loss does not depend on, and every
    /// intermediate node (freed once propagated).
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        let i = self.check(v)?;
        Ok(self.nodes[i].grad.as_deref())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Propagates d(loss)/d(node) to every tracked leaf the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape().to_vec();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.nodes[root].grad = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            backward::propagate(&mut self.nodes, i, &g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
