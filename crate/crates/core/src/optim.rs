//! First-order optimizers over flat parameter vectors.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
}

/// Stateful minimizer: `step` returns the descent update to add to the parameters.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
    RmsProp(RmsProp),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, dim)),
            OptimizerKind::RmsProp => Optimizer::RmsProp(RmsProp::new(lr, dim)),
        }
    }

    pub fn update(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        match self {
            Optimizer::Sgd { lr } => Ok(grad.iter().map(|g| -*lr * g).collect()),
            Optimizer::Adam(a) => a.update(grad),
            Optimizer::RmsProp(r) => r.update(grad),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn update(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.m.len(), grad.len())?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    lr: f64,
    decay: f64,
    eps: f64,
    s: Vec<f64>,
}

impl RmsProp {
    pub fn new(lr: f64, dim: usize) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            s: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.s.len(), grad.len())?;
        Ok(grad
            .iter()
            .zip(self.s.iter_mut())
            .map(|(&g, s)| {
                *s = self.decay * *s + (1.0 - self.decay) * g * g;
                -self.lr * g / (s.sqrt() + self.eps)
            })
            .collect())
    }
}

fn check_dim(expect: usize, got: usize) -> Result<()> {
    if expect == got {
        Ok(())
    } else {
        Err(Error::Shape(format!("optimizer holds {expect} coordinates, got {got}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut a = Adam::new(0.01, 3);
        let u = a.update(&[2.0, -0.5, 0.0]).unwrap();
        assert!((u[0] + 0.01).abs() < 1e-9);
        assert!((u[1] - 0.01).abs() < 1e-9);
        assert_eq!(u[2], 0.0);
        assert_eq!(a.steps(), 1);
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let mut opt = Optimizer::new(kind, 0.05, 2);
            let mut x = [3.0, -2.0];
            for _ in 0..2000 {
                let g = [2.0 * x[0], 8.0 * x[1]];
                let u = opt.update(&g).unwrap();
                x[0] += u[0];
                x[1] += u[1];
            }
            // Adaptive rules keep steps of order lr, so they settle within a few lr.
            assert!(x[0].abs() < 0.1 && x[1].abs() < 0.1, "{kind:?}: {x:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(Adam::new(0.1, 2).update(&[1.0]).is_err());
    }
}
