//! Runtime gradient checks against central finite differences.

use std::fmt;
use std::str::FromStr;

use dynloss_autodiff::{grad, hvp, hvp_mixed, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Dataset, Provenance};
use crate::engine::{dln_update, rmd_dln_grad, student_stage, teacher_stage, val_ce, Objective};
use crate::error::{Error, Result};
use crate::models::{ce_loss, Activation, Dln, LstmTeacher, Mlp, Preprocess, Student};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Ops,
    Hvp,
    HvpMixed,
    Rmd,
    Unroll,
    Teacher,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Ops,
        Check::Hvp,
        Check::HvpMixed,
        Check::Rmd,
        Check::Unroll,
        Check::Teacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Ops => "ops",
            Check::Hvp => "hvp",
            Check::HvpMixed => "hvp_mixed",
            Check::Rmd => "rmd",
            Check::Unroll => "unroll",
            Check::Teacher => "teacher",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Check::Ops | Check::Hvp | Check::HvpMixed => 1e-6,
            Check::Rmd => 1e-4,
            Check::Unroll => 1e-10,
            Check::Teacher => 1e-3,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub check: Check,
    pub error: f64,
    pub tolerance: f64,
    pub params: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p)?;
            p[i] = x[i] - h;
            let down = f(&p)?;
            p[i] = x[i];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Small bilevel instance: linear tanh student (9 parameters), tanh DLN
/// (20 parameters) and an LSTM teacher with a 2-unit layer (48 parameters).
pub struct Problem {
    pub student: Student,
    pub dln: Dln,
    pub teacher: LstmTeacher,
    pub data: Dataset,
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub teacher_params: ParamSet,
    pub val: Batch,
    pub eta: f64,
}

impl Problem {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data = Dataset::new(Tensor::new(vec![n, 2], x)?, y, 3, Provenance::SyntheticBlobs)?;
        let student = Student::from_mlp(Mlp::new("student", vec![2, 3], Activation::Tanh));
        let dln = Dln::new(&[3, 2], Activation::Tanh, 1.0);
        let teacher = LstmTeacher::new(&[2, 1], Preprocess::Raw)?;
        let theta = student.init(&mut rng);
        let phi = dln.init(&mut rng);
        let teacher_params = teacher.init(&mut rng);
        let val = data.batch(&(40..60).collect::<Vec<_>>());
        Ok(Problem {
            student,
            dln,
            teacher,
            data,
            theta,
            phi,
            teacher_params,
            val,
            eta: 0.5,
        })
    }

    /// `n` disjoint-as-possible batches of 8 from the first 40 rows, starting at batch `from`.
    pub fn batches(from: usize, n: usize) -> Vec<Vec<usize>> {
        (from..from + n)
            .map(|i| (0..8).map(|j| (i * 8 + j) % 40).collect())
            .collect()
    }

    /// Validation CE after `batches` DLN-driven steps from `theta`.
    pub fn val_after(&self, theta: &ParamSet, phi: &ParamSet, batches: &[Vec<usize>]) -> Result<f64> {
        let obj = Objective::Dln { dln: &self.dln, phi };
        let (traj, _) = student_stage(&self.student, obj, theta, &self.data, batches, self.eta, 0)?;
        val_ce(&self.student, traj.end(), &self.val)
    }
}

const FD_STEP: f64 = 1e-5;

fn flat(vars: &[Var]) -> Vec<f64> {
    vars.iter().flat_map(|v| v.value().data().to_vec()).collect()
}

/// A scalar built from most tape operations.
fn composite(tape: &Tape, x: &Var, w: &Var) -> Result<Var> {
    let h = x.matmul(w)?;
    let a = h.tanh()?.add(&h.sigmoid()?.scale(0.5)?)?;
    let b = h.leaky_relu(0.1)?.square()?.add_scalar(1.0)?.ln()?;
    let c = Var::concat(&[&a, &b], 1)?;
    let d = c.slice(1, 1, 4)?.div(&c.slice(1, 0, 4)?.exp()?.add_scalar(1.0)?)?;
    let idx: std::rc::Rc<[usize]> = vec![0usize, 5, 6, 11].into();
    let gathered = d.log_softmax()?.gather(idx)?.sum()?;
    let s = d.softmax()?.mul(&d)?.sum_axis0()?.sum()?;
    let l = d.logsumexp()?.mean()?;
    let bias = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]));
    let r = d.add_row(&bias)?.sum_last()?.mean()?;
    Ok(gathered.add(&s)?.sub(&l)?.add(&r.neg()?)?)
}

fn check_ops(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ws: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |xs: &[f64], ws: &[f64]| -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let x = tape.var(Tensor::matrix(3, 3, xs.to_vec())?);
        let w = tape.var(Tensor::matrix(3, 4, ws.to_vec())?);
        let f = composite(&tape, &x, &w)?;
        let g = grad(&f, &[&x, &w])?;
        Ok((f.value().item().unwrap_or(f64::NAN), flat(&g)))
    };
    let analytic = eval(&xs, &ws)?.1;
    let all: Vec<f64> = xs.iter().chain(&ws).copied().collect();
    let fd = central_diff(&all, FD_STEP, |p| Ok(eval(&p[..9], &p[9..])?.0))?;
    Ok(CheckResult {
        check: Check::Ops,
        error: relative_error(&analytic, &fd),
        tolerance: Check::Ops.tolerance(),
        params: all.len(),
    })
}

fn ce_grad(p: &Problem, theta: &ParamSet) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars = theta.register(&tape);
    let batch = p.data.batch(&Problem::batches(0, 1)[0]);
    let f = ce_loss(&p.student.forward(&vars, &tape.constant(batch.x))?, &batch.labels)?;
    Ok(flat(&grad(&f, &vars.iter().collect::<Vec<_>>())?))
}

fn check_hvp(p: &Problem, corrupt: bool) -> Result<CheckResult> {
    let direction: Vec<f64> = (0..p.theta.numel()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let v = p.theta.with_flat(&direction)?;
    let tape = Tape::new();
    let vars = p.theta.register(&tape);
    let batch = p.data.batch(&Problem::batches(0, 1)[0]);
    let f = ce_loss(&p.student.forward(&vars, &tape.constant(batch.x))?, &batch.labels)?;
    let mut analytic = flat(&hvp(&f, &vars.iter().collect::<Vec<_>>(), v.tensors())?);
    if corrupt {
        analytic[0] += 1e-3 * (1.0 + analytic[0].abs());
    }
    let base = p.theta.flatten().into_data();
    let at = |s: f64| -> Result<Vec<f64>> {
        let shifted: Vec<f64> = base.iter().zip(&direction).map(|(b, d)| b + s * d).collect();
        ce_grad(p, &p.theta.with_flat(&shifted)?)
    };
    let (up, down) = (at(FD_STEP)?, at(-FD_STEP)?);
    let fd: Vec<f64> = up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * FD_STEP)).collect();
    Ok(CheckResult {
        check: Check::Hvp,
        error: relative_error(&analytic, &fd),
        tolerance: Check::Hvp.tolerance(),
        params: base.len(),
    })
}

/// `∂/∂φ ⟨∇_θ L(θ, φ), v⟩` for the DLN-driven student loss.
fn check_hvp_mixed(p: &Problem) -> Result<CheckResult> {
    let direction: Vec<f64> = (0..p.theta.numel()).map(|i| ((i * 3 % 4) as f64 - 1.5) * 0.4).collect();
    let v = p.theta.with_flat(&direction)?;
    let batch = p.data.batch(&Problem::batches(0, 1)[0]);
    let eval = |phi: &ParamSet, mixed: bool| -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let theta = p.theta.register(&tape);
        let phi_vars = phi.register(&tape);
        let scores = p.student.forward(&theta, &tape.constant(batch.x.clone()))?;
        let f = p.dln.loss(&phi_vars, &scores, &batch.labels)?;
        let theta_refs: Vec<&Var> = theta.iter().collect();
        if mixed {
            let phi_refs: Vec<&Var> = phi_vars.iter().collect();
            return Ok((0.0, flat(&hvp_mixed(&f, &theta_refs, &phi_refs, v.tensors())?)));
        }
        let g = flat(&grad(&f, &theta_refs)?);
        Ok((g.iter().zip(&direction).map(|(a, b)| a * b).sum(), Vec::new()))
    };
    let analytic = eval(&p.phi, true)?.1;
    let base = p.phi.flatten().into_data();
    let fd = central_diff(&base, FD_STEP, |x| Ok(eval(&p.phi.with_flat(x)?, false)?.0))?;
    Ok(CheckResult {
        check: Check::HvpMixed,
        error: relative_error(&analytic, &fd),
        tolerance: Check::HvpMixed.tolerance(),
        params: base.len() + p.theta.numel(),
    })
}

fn check_rmd(p: &Problem) -> Result<CheckResult> {
    let batches = Problem::batches(0, 3);
    let obj = Objective::Dln {
        dln: &p.dln,
        phi: &p.phi,
    };
    let (traj, _) = student_stage(&p.student, obj, &p.theta, &p.data, &batches, p.eta, 0)?;
    let hg = rmd_dln_grad(&p.student, &p.dln, &p.phi, &traj, &p.data, &p.val)?;
    let base = p.phi.flatten().into_data();
    let fd = central_diff(&base, FD_STEP, |x| {
        p.val_after(&p.theta, &p.phi.with_flat(x)?, &batches)
    })?;
    Ok(CheckResult {
        check: Check::Rmd,
        error: relative_error(hg.phi.flatten().data(), &fd),
        tolerance: Check::Rmd.tolerance(),
        params: base.len(),
    })
}

/// One-step RMD against differentiating `θ − η ∇_θ L` directly on one tape.
fn check_unroll(p: &Problem) -> Result<CheckResult> {
    let batches = Problem::batches(0, 1);
    let obj = Objective::Dln {
        dln: &p.dln,
        phi: &p.phi,
    };
    let (traj, _) = student_stage(&p.student, obj, &p.theta, &p.data, &batches, p.eta, 0)?;
    let hg = rmd_dln_grad(&p.student, &p.dln, &p.phi, &traj, &p.data, &p.val)?;

    let tape = Tape::new();
    let theta = p.theta.register(&tape);
    let phi = p.phi.register(&tape);
    let batch = p.data.batch(&batches[0]);
    let scores = p.student.forward(&theta, &tape.constant(batch.x))?;
    let loss = p.dln.loss(&phi, &scores, &batch.labels)?;
    let g = grad(&loss, &theta.iter().collect::<Vec<_>>())?;
    let stepped = theta
        .iter()
        .zip(&g)
        .map(|(t, gi)| Ok(t.sub(&gi.scale(p.eta)?)?))
        .collect::<Result<Vec<Var>>>()?;
    let val_scores = p.student.forward(&stepped, &tape.constant(p.val.x.clone()))?;
    let e = ce_loss(&val_scores, &p.val.labels)?;
    let direct = flat(&grad(&e, &phi.iter().collect::<Vec<_>>())?);
    Ok(CheckResult {
        check: Check::Unroll,
        error: relative_error(hg.phi.flatten().data(), &direct),
        tolerance: Check::Unroll.tolerance(),
        params: direct.len(),
    })
}

/// Gradient of the second-stage validation CE with respect to the teacher,
/// through one DLN update.
pub fn teacher_pipeline(p: &Problem, teacher_params: &ParamSet, gamma: f64) -> Result<(f64, Option<ParamSet>)> {
    let first = Problem::batches(0, 3);
    let second = Problem::batches(3, 3);
    let obj = Objective::Dln {
        dln: &p.dln,
        phi: &p.phi,
    };
    let (traj1, _) = student_stage(&p.student, obj, &p.theta, &p.data, &first, p.eta, 0)?;
    let hg1 = rmd_dln_grad(&p.student, &p.dln, &p.phi, &traj1, &p.data, &p.val)?;
    let state = p.teacher.zero_state(p.phi.numel());
    let up = dln_update(&p.teacher, teacher_params, &state, &p.phi, &hg1.phi, gamma)?;
    let obj = Objective::Dln {
        dln: &p.dln,
        phi: &up.phi,
    };
    let (traj2, _) = student_stage(&p.student, obj, traj1.end(), &p.data, &second, p.eta, 1)?;
    let hg2 = teacher_stage(&p.student, &p.dln, &up.link, &up.phi, &traj2, &p.data, &p.val)?;
    Ok((hg2.val_ce, hg2.teacher))
}

fn check_teacher(p: &Problem) -> Result<CheckResult> {
    let gamma = 0.05;
    let analytic = teacher_pipeline(p, &p.teacher_params, gamma)?
        .1
        .ok_or(Error::BrokenLinkage)?;
    let base = p.teacher_params.flatten().into_data();
    let fd = central_diff(&base, FD_STEP, |x| {
        Ok(teacher_pipeline(p, &p.teacher_params.with_flat(x)?, gamma)?.0)
    })?;
    Ok(CheckResult {
        check: Check::Teacher,
        error: relative_error(analytic.flatten().data(), &fd),
        tolerance: Check::Teacher.tolerance(),
        params: base.len(),
    })
}

/// Runs every check; `corrupt` perturbs the analytic side of that one check.
pub fn run_checks(seed: u64, corrupt: Option<Check>) -> Result<Vec<CheckResult>> {
    let p = Problem::new(seed)?;
    let mut out = Vec::with_capacity(Check::ALL.len());
    for check in Check::ALL {
        let mut r = match check {
            Check::Ops => check_ops(seed)?,
            Check::Hvp => check_hvp(&p, corrupt == Some(Check::Hvp))?,
            Check::HvpMixed => check_hvp_mixed(&p)?,
            Check::Rmd => check_rmd(&p)?,
            Check::Unroll => check_unroll(&p)?,
            Check::Teacher => check_teacher(&p)?,
        };
        if corrupt == Some(check) && check != Check::Hvp {
            r.error += 1.0;
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_checks(0, None).unwrap() {
            assert!(r.passed(), "{} error {:e}", r.check, r.error);
        }
    }

    #[test]
    fn corruption_fails_exactly_one_check() {
        let rs = run_checks(1, Some(Check::Hvp)).unwrap();
        let failed: Vec<Check> = rs.iter().filter(|r| !r.passed()).map(|r| r.check).collect();
        assert_eq!(failed, vec![Check::Hvp]);
    }

    #[test]
    fn teacher_is_small() {
        let p = Problem::new(0).unwrap();
        assert_eq!(p.teacher_params.numel(), 48);
        assert_eq!("hvp_mixed".parse::<Check>().unwrap(), Check::HvpMixed);
        assert!("hessian".parse::<Check>().is_err());
    }
}
