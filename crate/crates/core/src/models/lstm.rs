use dynloss_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// How a raw gradient coordinate is encoded before entering the LSTM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preprocess {
    /// Two channels: `(ln|x| / p, sign x)` when `|x| >= e^-p`, else `(-1, e^p x)`.
    LogSign {
        p: f64,
    },
    Raw,
}

impl Preprocess {
    pub fn channels(self) -> usize {
        match self {
            Preprocess::LogSign { .. } => 2,
            Preprocess::Raw => 1,
        }
    }

    /// `[n, channels]` encoding of `x`.
    pub fn encode(self, x: &[f64]) -> Tensor {
        let data = match self {
            Preprocess::Raw => x.to_vec(),
            Preprocess::LogSign { p } => {
                let cut = (-p).exp();
                x.iter()
                    .flat_map(|&v| {
                        if v.abs() >= cut {
                            [v.abs().ln() / p, v.signum()]
                        } else {
                            [-1.0, p.exp() * v]
                        }
                    })
                    .collect()
            }
        };
        Tensor::new(vec![x.len(), self.channels()], data).expect("sized to shape")
    }
}

/// Per-coordinate hidden and cell states, one `[coords, hidden]` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl TeacherState {
    pub fn coords(&self) -> usize {
        self.h.first().map_or(0, |t| t.shape()[0])
    }
}

/// Stacked LSTM applied independently to every coordinate of a gradient,
/// with weights shared across coordinates. The last layer's hidden output
/// is the update.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmTeacher {
    hidden: Vec<usize>,
    preprocess: Preprocess,
}

impl LstmTeacher {
    pub const DEFAULT_HIDDEN: [usize; 4] = [64, 64, 64, 1];

    pub fn new(hidden: &[usize], preprocess: Preprocess) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!("invalid teacher hidden sizes {hidden:?}")));
        }
        if *hidden.last().expect("non-empty") != 1 {
            return Err(Error::Config("the last teacher layer must have one unit".into()));
        }
        Ok(LstmTeacher {
            hidden: hidden.to_vec(),
            preprocess,
        })
    }

    pub fn standard() -> Self {
        Self::new(&Self::DEFAULT_HIDDEN, Preprocess::LogSign { p: 10.0 }).expect("valid layout")
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn preprocess(&self) -> Preprocess {
        self.preprocess
    }

    fn input_sizes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.preprocess.channels())
            .chain(self.hidden.iter().copied())
            .zip(self.hidden.iter().copied())
    }

    /// Uniform `(-1/sqrt(h), 1/sqrt(h))` for every weight and bias.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        for (l, (input, h)) in self.input_sizes().enumerate() {
            let k = 1.0 / (h as f64).sqrt();
            let mut draw = |shape: Vec<usize>| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-k..k)).collect();
                Tensor::new(shape, data).expect("sized to shape")
            };
            p.push(format!("teacher.{l}.wx"), draw(vec![input, 4 * h]));
            p.push(format!("teacher.{l}.wh"), draw(vec![h, 4 * h]));
            p.push(format!("teacher.{l}.b"), draw(vec![4 * h]));
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.input_sizes().map(|(i, h)| (i + h + 1) * 4 * h).sum()
    }

    pub fn zero_state(&self, coords: usize) -> TeacherState {
        TeacherState {
            h: self.hidden.iter().map(|&h| Tensor::zeros(&[coords, h])).collect(),
            c: self.hidden.iter().map(|&h| Tensor::zeros(&[coords, h])).collect(),
        }
    }

    fn check(&self, params: &[Var], state: &TeacherState, coords: usize) -> Result<()> {
        if params.len() != 3 * self.hidden.len() {
            return Err(Error::Shape(format!(
                "teacher expects {} tensors, got {}",
                3 * self.hidden.len(),
                params.len()
            )));
        }
        for (l, (input, h)) in self.input_sizes().enumerate() {
            let ok = params[3 * l].shape() == [input, 4 * h]
                && params[3 * l + 1].shape() == [h, 4 * h]
                && params[3 * l + 2].shape() == [4 * h];
            if !ok {
                return Err(Error::Shape(format!("teacher layer {l} has wrong parameter shapes")));
            }
        }
        let state_ok = state.h.len() == self.hidden.len()
            && state.c.len() == self.hidden.len()
            && self
                .hidden
                .iter()
                .enumerate()
                .all(|(l, &h)| state.h[l].shape() == [coords, h] && state.c[l].shape() == [coords, h]);
        if !state_ok {
            return Err(Error::Shape(format!(
                "teacher state does not match {coords} coordinates"
            )));
        }
        Ok(())
    }

    /// One recurrent step over all coordinates of `grad`. Returns the update
    /// `g` (recorded on the parameters' tape, rank 1) and the next state.
    pub fn step(&self, params: &[Var], state: &TeacherState, grad: &[f64]) -> Result<(Var, TeacherState)> {
        let coords = grad.len();
        self.check(params, state, coords)?;
        let tape: &Tape = params[0].tape();
        let mut x = tape.constant(self.preprocess.encode(grad));
        let mut next = TeacherState {
            h: Vec::with_capacity(self.hidden.len()),
            c: Vec::with_capacity(self.hidden.len()),
        };
        for (l, &h) in self.hidden.iter().enumerate() {
            let h_prev = tape.constant(state.h[l].clone());
            let c_prev = tape.constant(state.c[l].clone());
            let gates = x
                .matmul(&params[3 * l])?
                .add(&h_prev.matmul(&params[3 * l + 1])?)?
                .add_row(&params[3 * l + 2])?;
            let i = gates.slice(1, 0, h)?.sigmoid()?;
            let f = gates.slice(1, h, h)?.sigmoid()?;
            let g = gates.slice(1, 2 * h, h)?.tanh()?;
            let o = gates.slice(1, 3 * h, h)?.sigmoid()?;
            let c = f.mul(&c_prev)?.add(&i.mul(&g)?)?;
            let h_new = o.mul(&c.tanh()?)?;
            next.h.push(h_new.value().clone());
            next.c.push(c.value().clone());
            x = h_new;
        }
        Ok((x.reshape(&[coords])?, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_sign_encoding() {
        let e = Preprocess::LogSign { p: 10.0 }.encode(&[1.0, -std::f64::consts::E, 1e-6, 0.0]);
        let d = e.data();
        assert_eq!(&d[0..2], &[0.0, 1.0]);
        assert!((d[2] - 0.1).abs() < 1e-15 && d[3] == -1.0);
        assert_eq!(d[4], -1.0);
        assert!((d[5] - 1e-6 * 10f64.exp()).abs() < 1e-12);
        assert_eq!(&d[6..8], &[-1.0, 0.0]);
    }

    #[test]
    fn zero_weights_and_state_give_zero_update() {
        let t = LstmTeacher::standard();
        let p = t.init(&mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        let tape = Tape::new();
        let (g, s) = t
            .step(&p.constants(&tape), &t.zero_state(3), &[0.5, -2.0, 1e-9])
            .unwrap();
        assert_eq!(g.value().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(s.coords(), 3);
    }

    #[test]
    fn shared_weights_act_coordinate_wise() {
        let t = LstmTeacher::new(&[4, 3, 1], Preprocess::LogSign { p: 10.0 }).unwrap();
        let p = t.init(&mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let vars = p.constants(&tape);
        let (g1, s1) = t.step(&vars, &t.zero_state(3), &[0.3, -0.01, 0.3]).unwrap();
        let (g2, _) = t.step(&vars, &s1, &[0.3, 2.0, 0.3]).unwrap();
        assert_eq!(g1.value().data()[0], g1.value().data()[2]);
        assert_eq!(g2.value().data()[0], g2.value().data()[2]);
        assert_eq!(g2.shape(), &[3]);
        assert!(g2.value().is_finite());
    }

    #[test]
    fn parameter_count_and_state_checks() {
        let t = LstmTeacher::new(&[2, 1], Preprocess::Raw).unwrap();
        let p = t.init(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(t.num_params(), p.numel());
        assert_eq!(p.numel(), (1 + 2 + 1) * 8 + (2 + 1 + 1) * 4);
        let tape = Tape::new();
        assert!(t.step(&p.constants(&tape), &t.zero_state(2), &[1.0, 2.0, 3.0]).is_err());
        assert!(LstmTeacher::new(&[4, 2], Preprocess::Raw).is_err());
    }
}
