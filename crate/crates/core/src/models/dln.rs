use std::rc::Rc;

use dynloss_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::mlp::{Activation, Mlp};
use super::{check_labels, scores_shape};
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Flat score indices for the 1-vs-1 decomposition of a `[batch, classes]`
/// score matrix: for every example, one (correct, wrong) pair per wrong class.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    index: Rc<[usize]>,
    examples: usize,
    classes: usize,
}

impl PairBatch {
    pub fn new(labels: &[usize], classes: usize) -> Result<Self> {
        check_labels(labels, classes)?;
        if classes < 2 {
            return Err(Error::Shape(format!("pairing needs at least 2 classes, got {classes}")));
        }
        let mut index = Vec::with_capacity(labels.len() * (classes - 1) * 2);
        for (b, &y) in labels.iter().enumerate() {
            for j in (0..classes).filter(|&j| j != y) {
                index.push(b * classes + y);
                index.push(b * classes + j);
            }
        }
        Ok(PairBatch {
            index: index.into(),
            examples: labels.len(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &Rc<[usize]> {
        &self.index
    }

    /// The `(s_y, s_j)` pairs of every example, in order.
    pub fn pairs(&self, scores: &Tensor) -> Result<Vec<[f64; 2]>> {
        if scores.shape() != [self.examples, self.classes] {
            return Err(Error::Shape(format!(
                "scores {:?} for {} examples of {} classes",
                scores.shape(),
                self.examples,
                self.classes
            )));
        }
        Ok(self
            .index
            .chunks(2)
            .map(|p| [scores.data()[p[0]], scores.data()[p[1]]])
            .collect())
    }
}

/// What the DLN reads from the student's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlnInput {
    /// Raw class scores.
    Scores,
    /// Softmax probabilities of the scores.
    Probabilities,
}

/// Dynamic loss network: maps (correct, wrong) prediction pairs to a scalar loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Dln {
    mlp: Mlp,
    weight: f64,
    input: DlnInput,
}

impl Dln {
    pub const DEFAULT_HIDDEN: [usize; 4] = [40; 4];

    pub fn new(hidden: &[usize], activation: Activation, weight: f64) -> Self {
        let mut dims = vec![2];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Dln {
            mlp: Mlp::new("dln", dims, activation),
            weight,
            input: DlnInput::Scores,
        }
    }

    pub fn with_input(mut self, input: DlnInput) -> Self {
        self.input = input;
        self
    }

    pub fn input(&self) -> DlnInput {
        self.input
    }

    /// Four hidden layers of 40 with leaky ReLU, weight 1.
    pub fn standard() -> Self {
        Self::new(&Self::DEFAULT_HIDDEN, Activation::LeakyRelu(0.01), 1.0)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        self.mlp.init(rng)
    }

    /// Raw network output for `[n, 2]` inputs, shape `[n]`.
    pub fn apply(&self, params: &[Var], inputs: &Var) -> Result<Var> {
        let out = self.mlp.forward(params, inputs)?;
        let n = out.shape()[0];
        Ok(out.reshape(&[n])?)
    }

    /// `w` times the mean DLN value over all pairs of the batch.
    pub fn loss(&self, params: &[Var], scores: &Var, labels: &[usize]) -> Result<Var> {
        let (_, c) = scores_shape(scores, labels)?;
        let pairs = PairBatch::new(labels, c)?;
        let scores = match self.input {
            DlnInput::Scores => scores.clone(),
            DlnInput::Probabilities => scores.softmax()?,
        };
        let inputs = scores.gather(pairs.index().clone())?.reshape(&[pairs.len(), 2])?;
        Ok(self.apply(params, &inputs)?.mean()?.scale(self.weight)?)
    }

    /// Loss a two-class student sees at score pairs `(correct, wrong)`: the
    /// network applied after this DLN's input transform.
    pub fn eval_scores(&self, params: &ParamSet, scores: &[[f64; 2]]) -> Result<Vec<f64>> {
        let inputs: Vec<[f64; 2]> = match self.input {
            DlnInput::Scores => scores.to_vec(),
            DlnInput::Probabilities => scores
                .iter()
                .map(|&[a, b]| {
                    let p = 1.0 / (1.0 + (b - a).exp());
                    [p, 1.0 - p]
                })
                .collect(),
        };
        self.eval_points(params, &inputs)
    }

    /// Evaluates the network on constant points, outside any caller's tape.
    pub fn eval_points(&self, params: &ParamSet, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        self.mlp.check(params)?;
        let tape = Tape::new();
        let flat = points.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new(vec![points.len(), 2], flat)?);
        Ok(self.apply(&params.constants(&tape), &x)?.value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dynloss_autodiff::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Dln, ParamSet) {
        let dln = Dln::new(&[3, 2], Activation::Tanh, 1.0);
        let p = dln.init(&mut ChaCha8Rng::seed_from_u64(11));
        (dln, p)
    }

    #[test]
    fn pair_layout_puts_correct_score_first() {
        let pb = PairBatch::new(&[1, 0], 3).unwrap();
        assert_eq!(pb.len(), 4);
        let s = Tensor::matrix(2, 3, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(pb.pairs(&s).unwrap(), vec![[1., 0.], [1., 2.], [3., 4.], [3., 5.]]);
        assert!(matches!(PairBatch::new(&[3], 3), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn two_class_loss_is_the_network_value() {
        let (dln, p) = small();
        let tape = Tape::new();
        let s = tape.constant(Tensor::matrix(1, 2, vec![0.7, -0.4]).unwrap());
        let l = dln.loss(&p.constants(&tape), &s, &[0]).unwrap().item().unwrap();
        assert_eq!(l, dln.eval_points(&p, &[[0.7, -0.4]]).unwrap()[0]);
    }

    #[test]
    fn zero_weight_gives_zero_loss_and_gradient() {
        let (dln, p) = small();
        let dln = dln.with_weight(0.0);
        let tape = Tape::new();
        let s = tape.var(Tensor::matrix(2, 3, vec![0.1, 0.5, -1., 2., 0., 1.]).unwrap());
        let l = dln.loss(&p.constants(&tape), &s, &[2, 1]).unwrap();
        assert_eq!(l.item(), Some(0.0));
        let g = grad(&l, &[&s]).unwrap().remove(0);
        assert!(g.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_wrong_classes_contribute_equally() {
        let (dln, p) = small();
        let tape = Tape::new();
        let s = tape.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, -0.2]).unwrap());
        let l = dln.loss(&p.constants(&tape), &s, &[0]).unwrap().item().unwrap();
        let single = dln.eval_points(&p, &[[0.3, -0.2]]).unwrap()[0];
        assert!((l - single).abs() < 1e-15);
    }

    #[test]
    fn standard_init_is_finite_on_the_grid() {
        let dln = Dln::standard();
        let p = dln.init(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(dln.mlp().num_params(), 5081);
        let pts: Vec<[f64; 2]> = (0..=20)
            .flat_map(|i| (0..=20).map(move |j| [-3.0 + 0.3 * i as f64, -3.0 + 0.3 * j as f64]))
            .collect();
        assert!(dln.eval_points(&p, &pts).unwrap().iter().all(|v| v.is_finite()));
    }
}
