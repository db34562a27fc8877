//! Vector-Jacobian products, expressed with recorded ops so that the
//! gradient computation can itself be differentiated.

use crate::error::Result;
use crate::ops::Op;
use crate::tape::Var;
use crate::tensor::Tensor;

fn as_matrix(v: &Var, vector_is_row: bool) -> Result<Var> {
    match v.shape() {
        [n] if vector_is_row => v.reshape(&[1, *n]),
        [n] => v.reshape(&[*n, 1]),
        [] => v.reshape(&[1, 1]),
        _ => Ok(v.clone()),
    }
}

fn reshape_like(v: Var, like: &Var) -> Result<Var> {
    if v.shape() == like.shape() {
        Ok(v)
    } else {
        v.reshape(like.shape())
    }
}

/// Gradient contributions of `out = op(parents)` given upstream `g`.
/// Entries for parents with `need[i] == false` are `None`.
pub(crate) fn vjp(op: &Op, parents: &[Var], out: &Var, g: &Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
    let tape = out.tape();
    let mut res: Vec<Option<Var>> = vec![None; parents.len()];
    let want = |i: usize| need[i];
    match op {
        Op::Leaf | Op::Const => {}
        Op::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            let a2 = as_matrix(a, true)?;
            let b2 = as_matrix(b, false)?;
            let rows = a2.shape()[0];
            let cols = b2.shape()[1];
            let g2 = g.reshape(&[rows, cols])?;
            if want(0) {
                res[0] = Some(reshape_like(g2.matmul(&b2.t()?)?, a)?);
            }
            if want(1) {
                res[1] = Some(reshape_like(a2.t()?.matmul(&g2)?, b)?);
            }
        }
        Op::Transpose => res[0] = Some(g.t()?),
        Op::Add => {
            if want(0) {
                res[0] = Some(g.clone());
            }
            if want(1) {
                res[1] = Some(g.clone());
            }
        }
        Op::Sub => {
            if want(0) {
                res[0] = Some(g.clone());
            }
            if want(1) {
                res[1] = Some(g.neg()?);
            }
        }
        Op::Mul => {
            if want(0) {
                res[0] = Some(g.mul(&parents[1])?);
            }
            if want(1) {
                res[1] = Some(g.mul(&parents[0])?);
            }
        }
        Op::Div => {
            let b = &parents[1];
            if want(0) {
                res[0] = Some(g.div(b)?);
            }
            if want(1) {
                res[1] = Some(g.mul(out)?.div(b)?.neg()?);
            }
        }
        Op::Scale(c) => res[0] = Some(g.scale(*c)?),
        Op::AddScalar(_) => res[0] = Some(g.clone()),
        Op::LeakyRelu(slope) => {
            let mask = parents[0].value().map(|x| if x > 0.0 { 1.0 } else { *slope });
            res[0] = Some(g.mul(&tape.constant(mask))?);
        }
        Op::Sigmoid => {
            let dy = out.mul(&out.neg()?.add_scalar(1.0)?)?;
            res[0] = Some(g.mul(&dy)?);
        }
        Op::Tanh => {
            let dy = out.square()?.neg()?.add_scalar(1.0)?;
            res[0] = Some(g.mul(&dy)?);
        }
        Op::Exp => res[0] = Some(g.mul(out)?),
        Op::Log => res[0] = Some(g.div(&parents[0])?),
        Op::Square => res[0] = Some(g.mul(&parents[0])?.scale(2.0)?),
        Op::Sum => res[0] = Some(g.broadcast_scalar(parents[0].shape())?),
        Op::Mean => {
            let n = parents[0].value().numel() as f64;
            res[0] = Some(g.broadcast_scalar(parents[0].shape())?.scale(1.0 / n)?);
        }
        Op::BroadcastScalar(_) => res[0] = Some(reshape_like(g.sum()?, &parents[0])?),
        Op::SumAxis0 => res[0] = Some(g.broadcast_axis0(parents[0].shape()[0])?),
        Op::BroadcastAxis0(_) => res[0] = Some(g.sum_axis0()?),
        Op::SumLast => {
            let n = *parents[0].shape().last().expect("rank checked in forward");
            res[0] = Some(g.broadcast_last(n)?);
        }
        Op::BroadcastLast(_) => res[0] = Some(g.sum_last()?),
        Op::Reshape(_) => res[0] = Some(g.reshape(parents[0].shape())?),
        Op::Concat(axis) => {
            let mut offset = 0;
            for (i, p) in parents.iter().enumerate() {
                let len = p.shape()[*axis];
                if want(i) {
                    res[i] = Some(g.slice(*axis, offset, len)?);
                }
                offset += len;
            }
        }
        Op::Slice { axis, start, .. } => {
            let total = parents[0].shape()[*axis];
            res[0] = Some(g.pad(*axis, *start, total)?);
        }
        Op::Pad { axis, start, .. } => {
            let len = parents[0].shape()[*axis];
            res[0] = Some(g.slice(*axis, *start, len)?);
        }
        Op::Softmax => {
            let n = *out.shape().last().expect("rank checked in forward");
            let inner = g.mul(out)?.sum_last()?.broadcast_last(n)?;
            res[0] = Some(out.mul(&g.sub(&inner)?)?);
        }
        Op::LogSoftmax => {
            let n = *out.shape().last().expect("rank checked in forward");
            let p = out.exp()?;
            res[0] = Some(g.sub(&p.mul(&g.sum_last()?.broadcast_last(n)?)?)?);
        }
        Op::LogSumExp => {
            let x = &parents[0];
            let n = *x.shape().last().expect("rank checked in forward");
            let p = x.sub(&out.broadcast_last(n)?)?.exp()?;
            res[0] = Some(g.broadcast_last(n)?.mul(&p)?);
        }
        Op::Gather(idx) => {
            let p = &parents[0];
            let scattered = g.scatter_add(idx.clone(), p.value().numel())?;
            res[0] = Some(reshape_like(scattered, p)?);
        }
        Op::ScatterAdd(idx, _) => {
            res[0] = Some(reshape_like(g.gather(idx.clone())?, &parents[0])?);
        }
    }
    Ok(res)
}

/// Seed for the output's own gradient.
pub(crate) fn ones_like(v: &Var) -> Var {
    v.tape().constant(Tensor::ones(v.shape()))
}
