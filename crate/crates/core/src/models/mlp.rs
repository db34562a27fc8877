use dynloss_autodiff::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    fn apply(self, x: &Var) -> Result<Var> {
        Ok(match self {
            Activation::LeakyRelu(s) => x.leaky_relu(s)?,
            Activation::Tanh => x.tanh()?,
        })
    }

    /// Kaiming gain for the activation.
    fn gain(self) -> f64 {
        match self {
            Activation::LeakyRelu(s) => (2.0 / (1.0 + s * s)).sqrt(),
            Activation::Tanh => 5.0 / 3.0,
        }
    }
}

/// Fully-connected network `dims[0] -> ... -> dims[last]`, activation after
/// every layer but the last. Weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>, activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an mlp needs input and output widths");
        Mlp {
            prefix: prefix.into(),
            dims,
            activation,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Kaiming-normal (fan-in) weights and zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        for (l, w) in self.dims.windows(2).enumerate() {
            let std = self.activation.gain() / (w[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
            p.push(
                format!("{}.{l}.weight", self.prefix),
                Tensor::new(vec![w[0], w[1]], data).expect("sized to shape"),
            );
            p.push(format!("{}.{l}.bias", self.prefix), Tensor::zeros(&[w[1]]));
        }
        p
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let expect = self.layers() * 2;
        if params.len() != expect {
            return Err(Error::Shape(format!(
                "{} expects {expect} tensors, got {}",
                self.prefix,
                params.len()
            )));
        }
        for (l, w) in self.dims.windows(2).enumerate() {
            let ws = params.tensors()[2 * l].shape();
            let bs = params.tensors()[2 * l + 1].shape();
            if ws != [w[0], w[1]] || bs != [w[1]] {
                return Err(Error::Shape(format!(
                    "{} layer {l}: weight {ws:?}, bias {bs:?}, expected [{}, {}] and [{}]",
                    self.prefix, w[0], w[1], w[1]
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::Shape(format!("{} parameters are not finite", self.prefix)));
        }
        Ok(())
    }

    /// `x` is `[batch, dims[0]]`; `params` alternate weight and bias.
    pub fn forward(&self, params: &[Var], x: &Var) -> Result<Var> {
        if params.len() != self.layers() * 2 {
            return Err(Error::Shape(format!(
                "{} expects {} tensors, got {}",
                self.prefix,
                self.layers() * 2,
                params.len()
            )));
        }
        if x.shape().len() != 2 || x.shape()[1] != self.dims[0] {
            return Err(Error::Shape(format!(
                "{} input {:?}, expected [_, {}]",
                self.prefix,
                x.shape(),
                self.dims[0]
            )));
        }
        let mut h = x.clone();
        for l in 0..self.layers() {
            h = h.matmul(&params[2 * l])?.add_row(&params[2 * l + 1])?;
            if l + 1 < self.layers() {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }
}
