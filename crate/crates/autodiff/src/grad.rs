//! Reverse-mode gradients and Hessian-vector products.

use crate::backward::{ones_like, vjp};
use crate::error::{AdError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Gradient of a scalar `output` with respect to each of `wrt`.
///
/// The returned values are recorded on the same tape, so any scalar built
/// from them can be differentiated again. A `wrt` value that `output` does
/// not depend on gets an exactly-zero gradient.
pub fn grad(output: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
    let tape = output.tape().clone();
    output.check_alive()?;
    for w in wrt {
        if !w.tape().same_as(&tape) {
            return Err(AdError::TapeMismatch);
        }
        w.check_alive()?;
    }
    if output.value().numel() != 1 {
        return Err(AdError::NonScalarOutput(output.shape().to_vec()));
    }

    let out_id = output.id();
    let parents = tape.parents_of(out_id);

    // depends[i]: node i is downstream of (or is) one of the targets.
    let mut depends = vec![false; out_id + 1];
    for w in wrt {
        if w.id() <= out_id {
            depends[w.id()] = true;
        }
    }
    for id in 0..=out_id {
        if !depends[id] {
            depends[id] = parents[id].iter().any(|&p| depends[p]);
        }
    }

    let mut grads: Vec<Option<Var>> = vec![None; out_id + 1];
    if depends[out_id] {
        grads[out_id] = Some(ones_like(output));
    }
    for id in (0..=out_id).rev() {
        if !depends[id] {
            continue;
        }
        let Some(g) = grads[id].clone() else { continue };
        let view = tape.view(id);
        if view.parents.is_empty() {
            continue;
        }
        let need: Vec<bool> = view.parents.iter().map(|&p| depends[p]).collect();
        if !need.iter().any(|&n| n) {
            continue;
        }
        let parent_vars: Vec<Var> = view.parents.iter().map(|&p| tape.handle(p)).collect();
        let node = tape.handle(id);
        let contributions = vjp(&view.op, &parent_vars, &node, &g, &need)?;
        for (&p, c) in view.parents.iter().zip(contributions) {
            let Some(c) = c else { continue };
            debug_assert_eq!(c.shape(), tape.handle(p).shape());
            grads[p] = Some(match grads[p].take() {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            grads
                .get(w.id())
                .cloned()
                .flatten()
                .unwrap_or_else(|| tape.constant(Tensor::zeros(w.shape())))
        })
        .collect())
}

/// `sum_i <grads[i], v[i]>` with `v` treated as constants.
pub fn dot_const(grads: &[Var], v: &[Tensor]) -> Result<Var> {
    if grads.len() != v.len() {
        return Err(AdError::Invalid {
            op: "dot_const",
            msg: format!("{} values against {} directions", grads.len(), v.len()),
        });
    }
    let mut total: Option<Var> = None;
    for (g, d) in grads.iter().zip(v) {
        if g.shape() != d.shape() {
            return Err(AdError::ShapeMismatch {
                op: "hvp",
                lhs: g.shape().to_vec(),
                rhs: d.shape().to_vec(),
            });
        }
        let term = g.mul(&g.tape().constant(d.clone()))?.sum()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or(AdError::Invalid {
        op: "dot_const",
        msg: "empty parameter list".into(),
    })
}

/// `(d^2 f / d params^2) . v`, computed as `grad(<grad(f, params), v>, params)`.
pub fn hvp(f: &Var, params: &[&Var], v: &[Tensor]) -> Result<Vec<Var>> {
    hvp_mixed(f, params, params, v)
}

/// `(d^2 f / d first d second) . v`: `v` is shaped like `first`, the result
/// like `second`.
pub fn hvp_mixed(f: &Var, first: &[&Var], second: &[&Var], v: &[Tensor]) -> Result<Vec<Var>> {
    let g = grad(f, first)?;
    let inner = dot_const(&g, v)?;
    grad(&inner, second)
}
