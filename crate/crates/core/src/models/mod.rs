//! Student, dynamic loss network and LSTM teacher.

mod dln;
mod lstm;
mod mlp;

pub use dln::{Dln, DlnInput, PairBatch};
pub use lstm::{LstmTeacher, Preprocess, TeacherState};
pub use mlp::{Activation, Mlp};

use std::rc::Rc;

use dynloss_autodiff::{Tensor, Var};

use crate::error::{Error, Result};

/// Student classifier: an MLP producing raw class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    mlp: Mlp,
}

impl Student {
    pub const DEFAULT_HIDDEN: [usize; 2] = [32, 32];

    pub fn new(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Student {
            mlp: Mlp::new("student", dims, Activation::LeakyRelu(0.01)),
        }
    }

    /// The larger fully-connected LeNet-300-100 layout.
    pub fn lenet(input: usize, classes: usize) -> Self {
        Self::new(input, &[300, 100], classes)
    }

    /// Students with any activation, used by small test instances.
    pub fn from_mlp(mlp: Mlp) -> Self {
        Student { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.dims()[0]
    }

    pub fn classes(&self) -> usize {
        *self.mlp.dims().last().expect("mlp has at least two layers")
    }

    pub fn init(&self, rng: &mut impl rand::Rng) -> crate::params::ParamSet {
        self.mlp.init(rng)
    }

    /// Raw scores, `[batch, classes]`.
    pub fn forward(&self, params: &[Var], x: &Var) -> Result<Var> {
        self.mlp.forward(params, x)
    }
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn scores_shape(scores: &Var, labels: &[usize]) -> Result<(usize, usize)> {
    match *scores.shape() {
        [b, c] if b == labels.len() => Ok((b, c)),
        _ => Err(Error::Shape(format!(
            "scores {:?} for {} labels",
            scores.shape(),
            labels.len()
        ))),
    }
}

/// Mean cross-entropy of softmax(scores) against `labels`.
pub fn ce_loss(scores: &Var, labels: &[usize]) -> Result<Var> {
    let (_, c) = scores_shape(scores, labels)?;
    check_labels(labels, c)?;
    let idx: Rc<[usize]> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    Ok(scores.log_softmax()?.gather(idx)?.mean()?.neg()?)
}

/// Per-example cross-entropy values.
pub fn ce_per_example(scores: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let [b, c] = *scores.shape() else {
        return Err(Error::Shape(format!("scores {:?} are not a matrix", scores.shape())));
    };
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} score rows for {} labels", labels.len())));
    }
    check_labels(labels, c)?;
    Ok(scores
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect())
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let c = scores.shape().last().copied().unwrap_or(1).max(1);
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}
