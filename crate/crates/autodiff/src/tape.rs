//! The recording tape and tape-attached values.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Rc<Tensor>,
    stamp: u64,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    next_stamp: u64,
}

/// Append-only record of a computation.
///
/// Parents always precede children, so node order is a topological order.
/// Cloning a `Tape` clones the handle, not the recording. A tape and all of
/// its [`Var`]s stay on one thread.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// A position on a tape, used to discard everything recorded after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint(usize);

/// A tensor recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    stamp: u64,
    value: Rc<Tensor>,
}

pub(crate) struct NodeView {
    pub op: Op,
    pub parents: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push_leaf(Op::Leaf, value)
    }

    /// Records a constant. Gradients flow to constants only if they are
    /// explicitly requested, and are zero.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(Op::Const, value)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let stamp = inner.next_stamp;
        inner.next_stamp += 1;
        let value = Rc::new(value);
        inner.nodes.push(Node {
            op,
            parents: Vec::new(),
            value: Rc::clone(&value),
            stamp,
        });
        Var {
            tape: self.clone(),
            id,
            stamp,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.len())
    }

    /// Drops every node recorded after `cp`. Vars that pointed at dropped
    /// nodes become stale; using them returns [`AdError::Truncated`].
    pub fn truncate(&self, cp: Checkpoint) {
        self.inner.borrow_mut().nodes.truncate(cp.0);
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Re-evaluates every recorded op from its parents' saved values and
    /// checks the result is bit-identical to what was recorded.
    pub fn replay_check(&self) -> Result<()> {
        let inner = self.inner.borrow();
        for (id, node) in inner.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &*inner.nodes[p].value).collect();
            let again = ops::eval(&node.op, &inputs)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(AdError::ReplayMismatch {
                    op: node.op.name(),
                    node: id,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn record(&self, op: Op, parents: &[&Var]) -> Result<Var> {
        for p in parents {
            if !p.tape.same_as(self) {
                return Err(AdError::TapeMismatch);
            }
            p.check_alive()?;
        }
        let inputs: Vec<&Tensor> = parents.iter().map(|p| &*p.value).collect();
        let value = ops::eval(&op, &inputs)?;
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let stamp = inner.next_stamp;
        inner.next_stamp += 1;
        let value = Rc::new(value);
        inner.nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.id).collect(),
            value: Rc::clone(&value),
            stamp,
        });
        Ok(Var {
            tape: self.clone(),
            id,
            stamp,
            value,
        })
    }

    pub(crate) fn view(&self, id: usize) -> NodeView {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        NodeView {
            op: node.op.clone(),
            parents: node.parents.clone(),
        }
    }

    pub(crate) fn parents_of(&self, upto: usize) -> Vec<Vec<usize>> {
        let inner = self.inner.borrow();
        inner.nodes[..=upto].iter().map(|n| n.parents.clone()).collect()
    }

    pub(crate) fn handle(&self, id: usize) -> Var {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        Var {
            tape: self.clone(),
            id,
            stamp: node.stamp,
            value: Rc::clone(&node.value),
        }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn item(&self) -> Option<f64> {
        self.value.item()
    }

    /// True if this value was produced by an op, as opposed to being a leaf
    /// or a constant.
    pub fn is_derived(&self) -> bool {
        let inner = self.tape.inner.borrow();
        inner
            .nodes
            .get(self.id)
            .is_some_and(|n| n.stamp == self.stamp && !matches!(n.op, Op::Leaf | Op::Const))
    }

    pub(crate) fn check_alive(&self) -> Result<()> {
        let inner = self.tape.inner.borrow();
        match inner.nodes.get(self.id) {
            Some(n) if n.stamp == self.stamp => Ok(()),
            _ => Err(AdError::Truncated(self.id)),
        }
    }

    fn unary(&self, op: Op) -> Result<Var> {
        self.tape.record(op, &[self])
    }

    fn binary(&self, op: Op, other: &Var) -> Result<Var> {
        self.tape.record(op, &[self, other])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.binary(Op::MatMul, other)
    }

    /// Transpose of a rank-2 value.
    pub fn t(&self) -> Result<Var> {
        self.unary(Op::Transpose)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(Op::Add, other)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(Op::Sub, other)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(Op::Mul, other)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(Op::Div, other)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c))
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(c))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(slope))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Op::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(Op::Tanh)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary(Op::Log)
    }

    pub fn square(&self) -> Result<Var> {
        self.unary(Op::Square)
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Result<Var> {
        self.unary(Op::Sum)
    }

    pub fn mean(&self) -> Result<Var> {
        self.unary(Op::Mean)
    }

    /// Repeats a one-element value over `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Var> {
        self.unary(Op::BroadcastScalar(shape.to_vec()))
    }

    /// `[n, rest..] -> [rest..]`
    pub fn sum_axis0(&self) -> Result<Var> {
        self.unary(Op::SumAxis0)
    }

    /// `[rest..] -> [n, rest..]`
    pub fn broadcast_axis0(&self, n: usize) -> Result<Var> {
        self.unary(Op::BroadcastAxis0(n))
    }

    /// `[.., n] -> [..]`
    pub fn sum_last(&self) -> Result<Var> {
        self.unary(Op::SumLast)
    }

    /// `[..] -> [.., n]`
    pub fn broadcast_last(&self, n: usize) -> Result<Var> {
        self.unary(Op::BroadcastLast(n))
    }

    /// Adds a bias vector to every row of a `[rows, cols]` value.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let rows = *self.shape().first().ok_or(AdError::Invalid {
            op: "add_row",
            msg: "needs rank >= 1".into(),
        })?;
        self.add(&bias.broadcast_axis0(rows)?)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AdError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        first.tape.record(Op::Concat(axis), parts)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(Op::Slice { axis, start, len })
    }

    /// Embeds this value at `start` along `axis` in a zero value of length `total`.
    pub fn pad(&self, axis: usize, start: usize, total: usize) -> Result<Var> {
        self.unary(Op::Pad { axis, start, total })
    }

    /// Softmax over the last axis, computed with a max shift.
    pub fn softmax(&self) -> Result<Var> {
        self.unary(Op::Softmax)
    }

    pub fn log_softmax(&self) -> Result<Var> {
        self.unary(Op::LogSoftmax)
    }

    pub fn logsumexp(&self) -> Result<Var> {
        self.unary(Op::LogSumExp)
    }

    /// Picks flat elements by index into a rank-1 result.
    pub fn gather(&self, idx: Rc<[usize]>) -> Result<Var> {
        self.unary(Op::Gather(idx))
    }

    /// Adds rank-1 values into a zero vector of length `n` at `idx`.
    pub fn scatter_add(&self, idx: Rc<[usize]>, n: usize) -> Result<Var> {
        self.unary(Op::ScatterAdd(idx, n))
    }
}
