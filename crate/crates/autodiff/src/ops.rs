//! Forward kernels for every recorded op.
//!
//! `eval` is a pure function of the op and its input values. The tape calls it
//! when recording and again when replaying, so both paths share one kernel.

use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    BroadcastScalar(Vec<usize>),
    SumAxis0,
    BroadcastAxis0(usize),
    SumLast,
    BroadcastLast(usize),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Pad { axis: usize, start: usize, total: usize },
    Softmax,
    LogSoftmax,
    LogSumExp,
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>, usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::SumAxis0 => "sum_axis0",
            Op::BroadcastAxis0(_) => "broadcast_axis0",
            Op::SumLast => "sum_last",
            Op::BroadcastLast(_) => "broadcast_last",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LogSumExp => "logsumexp",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AdError {
    AdError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AdError {
    AdError::Invalid { op, msg: msg.into() }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    a.zip_map(b, f)
}

pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: a is m*k, b is k*n, c is m*n, all row-major with the strides given.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, a_vec) = match a.shape() {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => return Err(mismatch("matmul", a, b)),
    };
    let (k2, n, b_vec) = match b.shape() {
        [k2] => (*k2, 1, true),
        [k2, n] => (*k2, *n, false),
        _ => return Err(mismatch("matmul", a, b)),
    };
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let shape = match (a_vec, b_vec) {
        (false, false) => vec![m, n],
        (false, true) => vec![m],
        (true, false) => vec![n],
        (true, true) => vec![],
    };
    Ok(Tensor::from_parts(shape, gemm(m, k, n, a.data(), b.data())))
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    let [r, c] = a.shape() else {
        return Err(invalid("transpose", format!("needs rank 2, got {:?}", a.shape())));
    };
    let (r, c) = (*r, *c);
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

fn last_axis(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape().last() {
        Some(&n) if n > 0 => Ok((a.numel() / n, n)),
        _ => Err(invalid(op, format!("needs a non-empty last axis, got {:?}", a.shape()))),
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn logsumexp_rows(op: &'static str, a: &Tensor) -> Result<Vec<f64>> {
    let (rows, n) = last_axis(op, a)?;
    Ok((0..rows)
        .map(|r| {
            let row = &a.data()[r * n..(r + 1) * n];
            let m = row_max(row);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect())
}

pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let unary = || inputs[0];
    Ok(match op {
        Op::Leaf | Op::Const => return Err(invalid(op.name(), "leaves carry their own value")),
        Op::MatMul => matmul(inputs[0], inputs[1])?,
        Op::Transpose => transpose(unary())?,
        Op::Add => elementwise("add", inputs[0], inputs[1], |a, b| a + b)?,
        Op::Sub => elementwise("sub", inputs[0], inputs[1], |a, b| a - b)?,
        Op::Mul => elementwise("mul", inputs[0], inputs[1], |a, b| a * b)?,
        Op::Div => elementwise("div", inputs[0], inputs[1], |a, b| a / b)?,
        Op::Scale(c) => unary().map(|v| v * c),
        Op::AddScalar(c) => unary().map(|v| v + c),
        Op::LeakyRelu(slope) => unary().map(|v| if v > 0.0 { v } else { slope * v }),
        Op::Sigmoid => unary().map(sigmoid),
        Op::Tanh => unary().map(f64::tanh),
        Op::Exp => unary().map(f64::exp),
        Op::Log => unary().map(f64::ln),
        Op::Square => unary().map(|v| v * v),
        Op::Sum => Tensor::scalar(unary().data().iter().sum()),
        Op::Mean => {
            let a = unary();
            if a.numel() == 0 {
                return Err(invalid("mean", "empty tensor"));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        }
        Op::BroadcastScalar(shape) => {
            let v = unary()
                .item()
                .ok_or_else(|| invalid("broadcast_scalar", "input must hold one element"))?;
            Tensor::full(shape, v)
        }
        Op::SumAxis0 => {
            let a = unary();
            let Some((&n, rest)) = a.shape().split_first() else {
                return Err(invalid("sum_axis0", "needs rank >= 1"));
            };
            let width: usize = rest.iter().product();
            let mut out = vec![0.0; width];
            for r in 0..n {
                for (o, v) in out.iter_mut().zip(&a.data()[r * width..(r + 1) * width]) {
                    *o += v;
                }
            }
            Tensor::from_parts(rest.to_vec(), out)
        }
        Op::BroadcastAxis0(n) => {
            let a = unary();
            let mut shape = vec![*n];
            shape.extend_from_slice(a.shape());
            let mut out = Vec::with_capacity(n * a.numel());
            for _ in 0..*n {
                out.extend_from_slice(a.data());
            }
            Tensor::from_parts(shape, out)
        }
        Op::SumLast => {
            let a = unary();
            let Some((&n, rest)) = a.shape().split_last() else {
                return Err(invalid("sum_last", "needs rank >= 1"));
            };
            let data = if n == 0 {
                vec![0.0; rest.iter().product()]
            } else {
                a.data().chunks(n).map(|c| c.iter().sum()).collect()
            };
            Tensor::from_parts(rest.to_vec(), data)
        }
        Op::BroadcastLast(n) => {
            let a = unary();
            let mut shape = a.shape().to_vec();
            shape.push(*n);
            let data = a.data().iter().flat_map(|&v| std::iter::repeat_n(v, *n)).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Reshape(shape) => {
            let a = unary();
            if shape.iter().product::<usize>() != a.numel() {
                return Err(AdError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::from_parts(shape.clone(), a.data().to_vec())
        }
        Op::Concat(axis) => concat(inputs, *axis)?,
        Op::Slice { axis, start, len } => {
            let a = unary();
            if *axis >= a.rank() || start + len > a.shape()[*axis] {
                return Err(invalid(
                    "slice",
                    format!("range {}..{} on axis {axis} of {:?}", start, start + len, a.shape()),
                ));
            }
            let (outer, full, inner) = around_axis(a.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full * inner + start * inner;
                out.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Op::Pad { axis, start, total } => {
            let a = unary();
            if *axis >= a.rank() || start + a.shape()[*axis] > *total {
                return Err(invalid(
                    "pad",
                    format!("cannot place {:?} at {start} in {total}", a.shape()),
                ));
            }
            let (outer, len, inner) = around_axis(a.shape(), *axis);
            let mut out = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = o * total * inner + start * inner;
                out[dst..dst + len * inner].copy_from_slice(&a.data()[o * len * inner..(o + 1) * len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *total;
            Tensor::from_parts(shape, out)
        }
        Op::Softmax => {
            let a = unary();
            let (rows, n) = last_axis("softmax", a)?;
            let mut out = Vec::with_capacity(a.numel());
            for r in 0..rows {
                let row = &a.data()[r * n..(r + 1) * n];
                let m = row_max(row);
                let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.into_iter().map(|e| e / z));
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::LogSoftmax => {
            let a = unary();
            let lse = logsumexp_rows("log_softmax", a)?;
            let n = a.shape()[a.rank() - 1];
            let data = a.data().iter().enumerate().map(|(i, v)| v - lse[i / n]).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::LogSumExp => {
            let a = unary();
            let lse = logsumexp_rows("logsumexp", a)?;
            Tensor::from_parts(a.shape()[..a.rank() - 1].to_vec(), lse)
        }
        Op::Gather(idx) => {
            let a = unary();
            let data = idx
                .iter()
                .map(|&i| {
                    a.data()
                        .get(i)
                        .copied()
                        .ok_or_else(|| invalid("gather", format!("index {i} out of {}", a.numel())))
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::vector(data)
        }
        Op::ScatterAdd(idx, n) => {
            let a = unary();
            if a.numel() != idx.len() {
                return Err(invalid(
                    "scatter_add",
                    format!("{} values for {} indices", a.numel(), idx.len()),
                ));
            }
            let mut out = vec![0.0; *n];
            for (&i, v) in idx.iter().zip(a.data()) {
                *out.get_mut(i)
                    .ok_or_else(|| invalid("scatter_add", format!("index {i} out of {n}")))? += v;
            }
            Tensor::vector(out)
        }
    })
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(invalid("concat", format!("axis {axis} out of rank {}", first.rank())));
    }
    let mut total = 0;
    for t in inputs {
        let same_rank = t.rank() == first.rank();
        let same_other = same_rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !same_other {
            return Err(mismatch("concat", first, t));
        }
        total += t.shape()[axis];
    }
    let (outer, _, inner) = around_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
