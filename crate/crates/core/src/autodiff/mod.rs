//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its output value and enough saved
//! state to compute its vector-Jacobian product. Inputs always precede the node
//! that consumes them, so [`Tape::backward`] is a single sweep in reverse
//! insertion order.
//!
//! A tape is single-threaded. Build one per training step and drop it afterwards.

mod backward;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::PadMode;
pub(crate) use ops::{Bcast, ConvGeom};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Sqrt,
    Square,
    Exp,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f32),
    Offset(usize),
    Unary(usize, Unary),
    Matmul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Softmax(usize),
    LogSoftmax(usize),
    /// Fused `softmax(scale · Q Kᵀ + mask) V`; `probs` is kept only when a
    /// gradient is needed.
    Attention {
        q: usize,
        k: usize,
        v: usize,
        mask: Option<usize>,
        scale: f32,
        probs: Vec<f32>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f32>,
    },
    SumAll(usize),
    SumAxis(usize, usize),
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Pad {
        x: usize,
        pads: [usize; 4],
        mode: PadMode,
    },
    AvgPool2(usize),
    HaarAnalysis(usize),
    HaarSynthesis(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of one forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. With `requires_grad` set its gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        backward::inputs_of(op)
            .iter()
            .all(|&i| self.nodes[i].value.all_finite())
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(v.idx)
    }

    /// Value of a node. Panics on a handle from another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("Var used with a foreign tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("Var used with a foreign tape")].requires_grad
    }

    /// Gradient of the last loss with respect to a leaf that requires grad.
    /// Interior nodes release their gradients during the sweep and return `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        let g = self.grads.get(i)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Populate gradients of `loss` with respect to every leaf that requires grad.
    ///
    /// Calling this twice without [`Tape::zero_grad`] adds the second set of
    /// gradients onto the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.grads.resize_with(self.nodes.len(), || None);
        let mut work: Vec<Option<Vec<f32>>> = (0..=root).map(|_| None).collect();
        work[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            backward::propagate(&self.nodes, i, &g, &mut work);
        }
        Ok(())
    }
}
