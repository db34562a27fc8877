//! The bilevel loop: student stages under a frozen DLN, hypergradients by
//! reverse-mode differentiation through the stored SGD trajectory, DLN
//! updates proposed by the teacher, and teacher updates from the
//! hypergradient of a second student stage.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use dynloss_autodiff::{dot_const, grad, AdError, Tape, Tensor, Var};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, Batch, BatchStream, Dataset, SplitState};
use crate::error::{Error, Result};
use crate::models::{accuracy, ce_loss, Dln, DlnInput, LstmTeacher, Student, TeacherState};
use crate::optim::{Adam, Optimizer, OptimizerKind};
use crate::params::ParamSet;

/// Seed stream tags; every random draw of a run derives from the run seed.
pub mod seeds {
    pub const STUDENT_INIT: u64 = 1;
    pub const DLN_INIT: u64 = 2;
    pub const TEACHER_INIT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const TRAIN_BATCHES: u64 = 5;
    pub const VAL_BATCHES: u64 = 6;
    pub const WARM_START: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const ABLATION: u64 = 9;
}

/// Rule that turns the hypergradient into a DLN update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    Lstm,
    Optimizer(OptimizerKind),
    /// The DLN never changes.
    Frozen,
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lstm" => TeacherKind::Lstm,
            "sgd" => TeacherKind::Optimizer(OptimizerKind::Sgd),
            "adam" => TeacherKind::Optimizer(OptimizerKind::Adam),
            "rmsprop" => TeacherKind::Optimizer(OptimizerKind::RmsProp),
            "frozen" => TeacherKind::Frozen,
            other => return Err(Error::Config(format!("unknown teacher {other:?}"))),
        })
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherKind::Lstm => "lstm",
            TeacherKind::Optimizer(OptimizerKind::Sgd) => "sgd",
            TeacherKind::Optimizer(OptimizerKind::Adam) => "adam",
            TeacherKind::Optimizer(OptimizerKind::RmsProp) => "rmsprop",
            TeacherKind::Frozen => "frozen",
        })
    }
}

/// Loss the student descends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentLoss {
    Dln,
    /// Fixed cross-entropy baseline; the DLN and teacher are not used.
    Ce,
}

impl FromStr for StudentLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dln" => Ok(StudentLoss::Dln),
            "ce" => Ok(StudentLoss::Ce),
            other => Err(Error::Config(format!("unknown student loss {other:?}"))),
        }
    }
}

impl fmt::Display for StudentLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudentLoss::Dln => "dln",
            StudentLoss::Ce => "ce",
        })
    }
}

/// What to do when a hypergradient is not finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonFinitePolicy {
    Fail,
    /// Log it and apply a zero update.
    Skip,
}

impl FromStr for NonFinitePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fail" => Ok(NonFinitePolicy::Fail),
            "skip" => Ok(NonFinitePolicy::Skip),
            other => Err(Error::Config(format!("unknown non-finite policy {other:?}"))),
        }
    }
}

impl fmt::Display for NonFinitePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NonFinitePolicy::Fail => "fail",
            NonFinitePolicy::Skip => "skip",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    /// SGD steps per student stage (N).
    pub steps: usize,
    /// Outer iterations (K); the DLN is updated once per iteration, so M = K.
    pub iterations: usize,
    pub eta: f64,
    pub gamma: f64,
    pub teacher_lr: f64,
    pub weight: f64,
    pub val_ratio: f64,
    pub train_batch: usize,
    pub val_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub teacher: TeacherKind,
    pub student_loss: StudentLoss,
    pub nonfinite: NonFinitePolicy,
    /// Fill `wall_ms`; off by default so records are reproducible bytes.
    pub record_timing: bool,
    /// Adam steps regressing the DLN onto cross-entropy before training.
    pub warm_start_steps: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 5,
            iterations: 40,
            eta: 0.1,
            gamma: 0.001,
            teacher_lr: 0.001,
            weight: 1.0,
            val_ratio: 0.5,
            train_batch: 25,
            val_batch: 100,
            epochs: 10,
            seed: 0,
            teacher: TeacherKind::Lstm,
            student_loss: StudentLoss::Dln,
            nonfinite: NonFinitePolicy::Fail,
            record_timing: false,
            warm_start_steps: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        for (name, v) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("teacher_lr", self.teacher_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive finite rate, got {v}"));
            }
        }
        if !self.weight.is_finite() {
            return bad(format!("weight must be finite, got {}", self.weight));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return bad(format!("val_ratio must lie in (0, 1), got {}", self.val_ratio));
        }
        if self.train_batch == 0 || self.val_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Outer iterations run in `epoch`; the remainder goes to the first epochs.
    pub fn iterations_in_epoch(&self, epoch: usize) -> usize {
        self.iterations / self.epochs + usize::from(epoch < self.iterations % self.epochs)
    }
}

/// The loss a student stage descends.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Dln { dln: &'a Dln, phi: &'a ParamSet },
    Ce,
}

impl Objective<'_> {
    fn loss(&self, tape: &Tape, scores: &Var, labels: &[usize]) -> Result<Var> {
        match self {
            Objective::Dln { dln, phi } => dln.loss(&phi.constants(tape), scores, labels),
            Objective::Ce => ce_loss(scores, labels),
        }
    }
}

/// Student iterates `θ⁰ … θᴺ` and the batch indices of every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub thetas: Vec<ParamSet>,
    pub batches: Vec<Vec<usize>>,
    pub eta: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.batches.len()
    }

    pub fn start(&self) -> &ParamSet {
        &self.thetas[0]
    }

    pub fn end(&self) -> &ParamSet {
        self.thetas.last().expect("a trajectory holds its start point")
    }

    fn check(&self) -> Result<()> {
        if self.thetas.len() != self.batches.len() + 1 {
            return Err(Error::Shape(format!(
                "trajectory holds {} iterates for {} steps",
                self.thetas.len(),
                self.batches.len()
            )));
        }
        Ok(())
    }

    /// Recomputes `θⁱ` (1-based) from `θ^{i-1}` and the stored batch.
    pub fn replay_step(&self, i: usize, student: &Student, objective: Objective, data: &Dataset) -> Result<ParamSet> {
        self.check()?;
        if i == 0 || i > self.steps() {
            return Err(Error::Shape(format!("step {i} outside 1..={}", self.steps())));
        }
        let batch = data.batch(&self.batches[i - 1]);
        Ok(sgd_step(student, objective, &self.thetas[i - 1], &batch, self.eta)?.0)
    }
}

/// One SGD step; returns the new parameters and the loss before the step.
pub fn sgd_step(
    student: &Student,
    objective: Objective,
    theta: &ParamSet,
    batch: &Batch,
    eta: f64,
) -> std::result::Result<(ParamSet, f64), Error> {
    let tape = Tape::new();
    let vars = theta.register(&tape);
    let scores = student.forward(&vars, &tape.constant(batch.x.clone()))?;
    let loss = objective.loss(&tape, &scores, &batch.labels)?;
    let refs: Vec<&Var> = vars.iter().collect();
    let grads = grad(&loss, &refs)?;
    let mut next = ParamSet::new();
    for ((name, t), g) in theta.iter().zip(&grads) {
        next.push(name, t.axpy(-eta, g.value())?);
    }
    Ok((next, loss.item().expect("scalar loss")))
}

/// `N = batches.len()` SGD steps from `theta`. Returns the trajectory and the
/// mean loss over the steps.
pub fn student_stage(
    student: &Student,
    objective: Objective,
    theta: &ParamSet,
    data: &Dataset,
    batches: &[Vec<usize>],
    eta: f64,
    stage: usize,
) -> Result<(Trajectory, f64)> {
    let mut thetas = Vec::with_capacity(batches.len() + 1);
    thetas.push(theta.clone());
    let mut total = 0.0;
    for (step, idx) in batches.iter().enumerate() {
        let batch = data.batch(idx);
        let current = thetas.last().expect("non-empty");
        let (next, loss) = sgd_step(student, objective, current, &batch, eta).map_err(|e| match e {
            Error::Autodiff(AdError::NonFinite { .. }) => Error::NonFiniteLoss { stage, step },
            other => other,
        })?;
        if !loss.is_finite() || !next.is_finite() {
            return Err(Error::NonFiniteLoss { stage, step });
        }
        total += loss;
        thetas.push(next);
    }
    let mean = if batches.is_empty() {
        0.0
    } else {
        total / batches.len() as f64
    };
    Ok((
        Trajectory {
            thetas,
            batches: batches.to_vec(),
            eta,
        },
        mean,
    ))
}

/// Mean cross-entropy of the student on `batch`.
pub fn val_ce(student: &Student, theta: &ParamSet, batch: &Batch) -> Result<f64> {
    let tape = Tape::new();
    let scores = student.forward(&theta.constants(&tape), &tape.constant(batch.x.clone()))?;
    Ok(ce_loss(&scores, &batch.labels)?.item().expect("scalar loss"))
}

pub fn test_accuracy(student: &Student, theta: &ParamSet, batch: &Batch) -> Result<f64> {
    let tape = Tape::new();
    let scores = student.forward(&theta.constants(&tape), &tape.constant(batch.x.clone()))?;
    Ok(accuracy(scores.value(), &batch.labels))
}

/// The tape on which `φ' = φ + γ g(ϕ_T)` was recorded.
#[derive(Clone, Debug)]
pub struct TeacherLink {
    pub tape: Tape,
    /// `φ'` flattened, as a function of `teacher`.
    pub phi_next: Var,
    pub teacher: Vec<Var>,
}

/// Which accumulators the reverse loop carries.
#[derive(Clone, Copy, Debug)]
pub enum Accumulate<'a> {
    Dln,
    DlnAndTeacher(&'a TeacherLink),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    /// `∂ e_val / ∂ φ`.
    pub phi: ParamSet,
    /// `∂ e_val / ∂ θ⁰`.
    pub theta0: ParamSet,
    /// `∂ e_val / ∂ ϕ_T`, when requested.
    pub teacher: Option<ParamSet>,
    /// `e_val` at the end of the trajectory.
    pub val_ce: f64,
}

fn finite_or(what: &'static str, stage: usize, t: &ParamSet) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteHypergradient { what, stage })
    }
}

/// Reverse pass over a trajectory. Starting from `∇θᴺ = ∂e_val/∂θᴺ`, every
/// step `i = N … 1` applies
/// `∇φ ← ∇φ − η (∂²L/∂θ∂φ) ∇θⁱ` and `∇θ^{i−1} = ∇θⁱ − η (∂²L/∂θ²) ∇θⁱ`,
/// both read off one differentiation of `⟨∂L/∂θ, ∇θⁱ⟩` at `θ^{i−1}`. With a
/// teacher link the accumulated `∇φ` is finally pulled back through
/// `φ' = φ + γ g(ϕ_T)`; the update is linear in `∇φ`, so one pull-back
/// after the loop equals accumulating it step by step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_loop(
    student: &Student,
    dln: &Dln,
    phi: &ParamSet,
    traj: &Trajectory,
    data: &Dataset,
    val: &Batch,
    acc: Accumulate,
    stage: usize,
) -> Result<Hypergradient> {
    traj.check()?;
    dln.mlp().check(phi)?;
    for t in &traj.thetas {
        student.mlp().check(t)?;
    }
    if let Accumulate::DlnAndTeacher(link) = acc {
        check_link(link, phi)?;
    }

    let (mut d_theta, val_ce) = {
        let tape = Tape::new();
        let vars = traj.end().register(&tape);
        let scores = student.forward(&vars, &tape.constant(val.x.clone()))?;
        let e = ce_loss(&scores, &val.labels)?;
        let refs: Vec<&Var> = vars.iter().collect();
        let g = grad(&e, &refs)?;
        let tensors: Vec<Tensor> = g.iter().map(|v| v.value().clone()).collect();
        (tensors, e.item().expect("scalar"))
    };
    let mut d_phi: Vec<Tensor> = phi.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();

    for i in (1..=traj.steps()).rev() {
        let tape = Tape::new();
        let theta = traj.thetas[i - 1].register(&tape);
        let phi_vars = phi.register(&tape);
        let batch = data.batch(&traj.batches[i - 1]);
        let scores = student.forward(&theta, &tape.constant(batch.x))?;
        let loss = dln.loss(&phi_vars, &scores, &batch.labels)?;
        let theta_refs: Vec<&Var> = theta.iter().collect();
        let g = grad(&loss, &theta_refs)?;
        let inner = dot_const(&g, &d_theta)?;
        let all: Vec<&Var> = theta.iter().chain(phi_vars.iter()).collect();
        let h = grad(&inner, &all)?;
        let (h_theta, h_phi) = h.split_at(theta.len());
        for (d, hv) in d_phi.iter_mut().zip(h_phi) {
            *d = d.axpy(-traj.eta, hv.value())?;
        }
        for (d, hv) in d_theta.iter_mut().zip(h_theta) {
            *d = d.axpy(-traj.eta, hv.value())?;
        }
    }

    let mut phi_grad = ParamSet::new();
    for ((name, _), t) in phi.iter().zip(d_phi) {
        phi_grad.push(name, t);
    }
    let mut theta0 = ParamSet::new();
    for ((name, _), t) in traj.start().iter().zip(d_theta) {
        theta0.push(name, t);
    }
    finite_or("dln hypergradient", stage, &phi_grad)?;
    finite_or("student hypergradient", stage, &theta0)?;

    let teacher = match acc {
        Accumulate::Dln => None,
        Accumulate::DlnAndTeacher(link) => {
            let flat = phi_grad.flatten();
            let inner = dot_const(std::slice::from_ref(&link.phi_next), std::slice::from_ref(&flat))?;
            let refs: Vec<&Var> = link.teacher.iter().collect();
            let g = grad(&inner, &refs)?;
            let mut out = ParamSet::new();
            for (i, v) in g.iter().enumerate() {
                out.push(format!("teacher.{i}"), v.value().clone());
            }
            finite_or("teacher hypergradient", stage, &out)?;
            Some(out)
        }
    };

    Ok(Hypergradient {
        phi: phi_grad,
        theta0,
        teacher,
        val_ce,
    })
}

fn check_link(link: &TeacherLink, phi: &ParamSet) -> Result<()> {
    let linked = !link.teacher.is_empty()
        && link.phi_next.is_derived()
        && link.teacher.iter().all(|t| t.tape().same_as(&link.tape))
        && link.phi_next.tape().same_as(&link.tape);
    if !linked {
        return Err(Error::BrokenLinkage);
    }
    if link.phi_next.value() != &phi.flatten() {
        return Err(Error::Shape(
            "teacher link was recorded for different DLN parameters".into(),
        ));
    }
    Ok(())
}

/// `∂ e_val(θᴺ) / ∂ φ` through the trajectory.
pub fn rmd_dln_grad(
    student: &Student,
    dln: &Dln,
    phi: &ParamSet,
    traj: &Trajectory,
    data: &Dataset,
    val: &Batch,
) -> Result<Hypergradient> {
    reverse_loop(student, dln, phi, traj, data, val, Accumulate::Dln, 0)
}

/// `∂ e_val(θ²ᴺ) / ∂ ϕ_T` for a trajectory trained under the linked `φ'`.
pub fn teacher_stage(
    student: &Student,
    dln: &Dln,
    link: &TeacherLink,
    phi_next: &ParamSet,
    traj: &Trajectory,
    data: &Dataset,
    val: &Batch,
) -> Result<Hypergradient> {
    reverse_loop(
        student,
        dln,
        phi_next,
        traj,
        data,
        val,
        Accumulate::DlnAndTeacher(link),
        0,
    )
}

#[derive(Clone, Debug)]
pub struct DlnUpdate {
    pub phi: ParamSet,
    pub g: Tensor,
    pub state: TeacherState,
    pub link: TeacherLink,
}

/// `φ' = φ + γ g` with `g` from one teacher step on `∇φ`, recorded on a
/// fresh tape with the teacher parameters as leaves.
pub fn dln_update(
    teacher: &LstmTeacher,
    teacher_params: &ParamSet,
    state: &TeacherState,
    phi: &ParamSet,
    grad_phi: &ParamSet,
    gamma: f64,
) -> Result<DlnUpdate> {
    if !phi.same_layout(grad_phi) {
        return Err(Error::Shape("hypergradient does not match the DLN parameters".into()));
    }
    let tape = Tape::new();
    let vars = teacher_params.register(&tape);
    let (g, state) = teacher.step(&vars, state, grad_phi.flatten().data())?;
    let phi_next = tape.constant(phi.flatten()).add(&g.scale(gamma)?)?;
    Ok(DlnUpdate {
        phi: phi.with_flat(phi_next.value().data())?,
        g: g.value().clone(),
        state,
        link: TeacherLink {
            tape,
            phi_next,
            teacher: vars,
        },
    })
}

pub const WARM_RANGE: f64 = 10.0;

/// Fits the DLN to pairwise cross-entropy before training: on score pairs
/// `(s_y, s_j)` uniform in `[-WARM_RANGE, WARM_RANGE]²` the target is
/// `ln(1 + e^{s_j − s_y})`; on probability pairs `(p_y, p_j)` uniform over
/// the simplex it is `−ln(p_y / (p_y + p_j))`.
pub fn warm_start_dln(dln: &Dln, phi: &ParamSet, steps: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(1e-3, phi.numel());
    let mut flat = phi.flatten().into_data();
    const BATCH: usize = 128;
    for _ in 0..steps {
        let mut pts = Vec::with_capacity(2 * BATCH);
        let mut target = Vec::with_capacity(BATCH);
        for _ in 0..BATCH {
            let (a, b, z) = match dln.input() {
                DlnInput::Scores => {
                    let a: f64 = rng.random_range(-WARM_RANGE..WARM_RANGE);
                    let b: f64 = rng.random_range(-WARM_RANGE..WARM_RANGE);
                    (a, b, b - a)
                }
                DlnInput::Probabilities => {
                    let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
                    if a + b > 1.0 {
                        (a, b) = (1.0 - a, 1.0 - b);
                    }
                    let a = a.max(1e-4);
                    (a, b, b.max(1e-300).ln() - a.ln())
                }
            };
            target.push(z.max(0.0) + (-z.abs()).exp().ln_1p());
            pts.push(a);
            pts.push(b);
        }
        let tape = Tape::new();
        let params = phi.with_flat(&flat)?.register(&tape);
        let out = dln.apply(&params, &tape.constant(Tensor::new(vec![BATCH, 2], pts)?))?;
        let loss = out.sub(&tape.constant(Tensor::vector(target)))?.square()?.mean()?;
        let refs: Vec<&Var> = params.iter().collect();
        let g: Vec<f64> = grad(&loss, &refs)?
            .iter()
            .flat_map(|v| v.value().data().to_vec())
            .collect();
        for (p, u) in flat.iter_mut().zip(adam.update(&g)?) {
            *p += u;
        }
    }
    phi.with_flat(&flat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    /// First stage of an iteration; its hypergradient updates the DLN.
    Dln,
    /// Second stage; its hypergradient updates the teacher.
    Teacher,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Dln => "dln",
            StageKind::Teacher => "teacher",
        })
    }
}

/// One row per student stage. On `teacher` rows `g_norm` holds `‖∇ϕ_T‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRow {
    pub stage: usize,
    pub kind: StageKind,
    pub train_loss: f64,
    pub val_ce: f64,
    pub test_acc: f64,
    pub grad_phi_norm: f64,
    pub g_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<StageRow>,
}

impl RunRecord {
    pub const HEADER: &'static str = "stage,kind,train_loss,val_ce,test_acc,grad_phi_norm,g_norm,wall_ms";

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            Self::write_row(&mut w, r)?;
        }
        Ok(())
    }

    pub fn write_row(mut w: impl Write, r: &StageRow) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.stage, r.kind, r.train_loss, r.val_ce, r.test_acc, r.grad_phi_norm, r.g_norm, r.wall_ms
        )
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_acc)
    }

    /// Median wall time of a full outer iteration (both stage rows).
    pub fn median_iteration_ms(&self) -> Option<f64> {
        let mut per: Vec<f64> = self.rows.chunks(2).map(|c| c.iter().map(|r| r.wall_ms).sum()).collect();
        if per.is_empty() {
            return None;
        }
        per.sort_by(f64::total_cmp);
        Some(per[per.len() / 2])
    }
}

/// Networks of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub student: Student,
    pub dln: Dln,
    pub teacher: LstmTeacher,
}

/// Parameters of all three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub teacher: ParamSet,
}

impl RunState {
    /// Initial parameters derived from `cfg.seed`, with the optional DLN warm start.
    pub fn init(models: &Models, cfg: &StageConfig) -> Result<Self> {
        let rng = |tag| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag));
        let mut phi = models.dln.init(&mut rng(seeds::DLN_INIT));
        if cfg.warm_start_steps > 0 {
            phi = warm_start_dln(
                &models.dln,
                &phi,
                cfg.warm_start_steps,
                derive_seed(cfg.seed, seeds::WARM_START),
            )?;
        }
        Ok(RunState {
            theta: models.student.init(&mut rng(seeds::STUDENT_INIT)),
            phi,
            teacher: models.teacher.init(&mut rng(seeds::TEACHER_INIT)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DlnSnapshot {
    pub epoch: usize,
    pub phi: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub state: RunState,
    pub record: RunRecord,
    /// DLN parameters before training (epoch 0) and after every epoch.
    pub snapshots: Vec<DlnSnapshot>,
    /// Hypergradients replaced by a zero update under [`NonFinitePolicy::Skip`].
    pub skipped: usize,
    /// Student SGD steps taken, `2 K N` for a complete run.
    pub sgd_steps: usize,
}

enum Rule {
    Lstm { adam: Adam, state: TeacherState },
    Optimizer(Optimizer),
    Frozen,
}

/// Runs the full bilevel loop from seed-derived parameters.
pub fn run_l2t_dln(cfg: &StageConfig, models: &Models, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let init = RunState::init(models, cfg)?;
    run_from(cfg, models, init, train, test, |_| Ok(()))
}

/// The bilevel loop from given parameters. `on_row` sees every stage row as
/// soon as it exists.
pub fn run_from(
    cfg: &StageConfig,
    models: &Models,
    init: RunState,
    train: &Dataset,
    test: &Dataset,
    mut on_row: impl FnMut(&StageRow) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let Models { student, dln, teacher } = models;
    let dln = &dln.clone().with_weight(cfg.weight);
    student.mlp().check(&init.theta)?;
    dln.mlp().check(&init.phi)?;
    if train.classes() != student.classes() || test.classes() != student.classes() {
        return Err(Error::Config(format!(
            "datasets have {} and {} classes, student outputs {}",
            train.classes(),
            test.classes(),
            student.classes()
        )));
    }
    let test_batch = test.all();
    let RunState {
        mut theta,
        mut phi,
        teacher: mut teacher_params,
    } = init;
    let mut rule = match cfg.teacher {
        TeacherKind::Lstm => Rule::Lstm {
            adam: Adam::new(cfg.teacher_lr, teacher_params.numel()),
            state: teacher.zero_state(phi.numel()),
        },
        TeacherKind::Optimizer(kind) => Rule::Optimizer(Optimizer::new(kind, cfg.gamma, phi.numel())),
        TeacherKind::Frozen => Rule::Frozen,
    };
    let use_dln = cfg.student_loss == StudentLoss::Dln;

    let mut record = RunRecord::default();
    let mut snapshots = vec![DlnSnapshot {
        epoch: 0,
        phi: phi.clone(),
    }];
    let mut skipped = 0;
    let mut sgd_steps = 0;
    let mut split = SplitState::new(train.len(), cfg.val_ratio, derive_seed(cfg.seed, seeds::SPLIT))?;
    let mut stage = 0;

    for epoch in 0..cfg.epochs {
        let (views, next_split) = split.redivide();
        split = next_split;
        let mut train_stream = BatchStream::new(
            &views.train,
            derive_seed(derive_seed(cfg.seed, seeds::TRAIN_BATCHES), epoch as u64),
        );
        let mut val_stream = BatchStream::new(
            &views.val,
            derive_seed(derive_seed(cfg.seed, seeds::VAL_BATCHES), epoch as u64),
        );
        if let Rule::Lstm { state, .. } = &mut rule {
            *state = teacher.zero_state(phi.numel());
        }

        for _ in 0..cfg.iterations_in_epoch(epoch) {
            // Stage 1 under the current DLN, then the DLN update.
            let clock = Instant::now();
            let batches1: Vec<Vec<usize>> = (0..cfg.steps)
                .map(|_| train_stream.next_batch(cfg.train_batch))
                .collect();
            let val1 = train.batch(&val_stream.next_batch(cfg.val_batch));
            let objective = if use_dln {
                Objective::Dln { dln, phi: &phi }
            } else {
                Objective::Ce
            };
            let (traj1, loss1) = student_stage(student, objective, &theta, train, &batches1, cfg.eta, stage)?;
            theta = traj1.end().clone();
            sgd_steps += traj1.steps();

            let mut row1 = StageRow {
                stage,
                kind: StageKind::Dln,
                train_loss: loss1,
                val_ce: 0.0,
                test_acc: test_accuracy(student, &theta, &test_batch)?,
                grad_phi_norm: 0.0,
                g_norm: 0.0,
                wall_ms: 0.0,
            };
            let mut link = None;
            let needs_hypergradient = use_dln && !matches!(rule, Rule::Frozen);
            if needs_hypergradient {
                match skip_non_finite(
                    cfg,
                    reverse_loop(student, dln, &phi, &traj1, train, &val1, Accumulate::Dln, stage),
                    &mut skipped,
                )? {
                    Some(hg) => {
                        row1.val_ce = hg.val_ce;
                        row1.grad_phi_norm = hg.phi.norm();
                        match &mut rule {
                            Rule::Lstm { state, .. } => {
                                let up = dln_update(teacher, &teacher_params, state, &phi, &hg.phi, cfg.gamma)?;
                                row1.g_norm = up.g.norm();
                                *state = up.state;
                                phi = up.phi;
                                link = Some(up.link);
                            }
                            Rule::Optimizer(opt) => {
                                let u = opt.update(hg.phi.flatten().data())?;
                                row1.g_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt() / cfg.gamma;
                                let delta = phi.with_flat(&u)?;
                                phi = phi.axpy(1.0, &delta)?;
                            }
                            Rule::Frozen => unreachable!("frozen rule skips the hypergradient"),
                        }
                    }
                    None => row1.val_ce = val_ce(student, &theta, &val1).unwrap_or(f64::NAN),
                }
            } else {
                row1.val_ce = val_ce(student, &theta, &val1)?;
            }
            if cfg.record_timing {
                row1.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
            }
            on_row(&row1)?;
            record.rows.push(row1);
            stage += 1;

            // Stage 2 under the updated DLN, then the teacher update.
            let clock = Instant::now();
            let batches2: Vec<Vec<usize>> = (0..cfg.steps)
                .map(|_| train_stream.next_batch(cfg.train_batch))
                .collect();
            let val2 = train.batch(&val_stream.next_batch(cfg.val_batch));
            let objective = if use_dln {
                Objective::Dln { dln, phi: &phi }
            } else {
                Objective::Ce
            };
            let (traj2, loss2) = student_stage(student, objective, &theta, train, &batches2, cfg.eta, stage)?;
            theta = traj2.end().clone();
            sgd_steps += traj2.steps();
            let mut row2 = StageRow {
                stage,
                kind: StageKind::Teacher,
                train_loss: loss2,
                val_ce: 0.0,
                test_acc: test_accuracy(student, &theta, &test_batch)?,
                grad_phi_norm: 0.0,
                g_norm: 0.0,
                wall_ms: 0.0,
            };
            match (&mut rule, &link) {
                (Rule::Lstm { adam, .. }, Some(link)) => {
                    let hg = skip_non_finite(
                        cfg,
                        reverse_loop(
                            student,
                            dln,
                            &phi,
                            &traj2,
                            train,
                            &val2,
                            Accumulate::DlnAndTeacher(link),
                            stage,
                        ),
                        &mut skipped,
                    )?;
                    match hg {
                        Some(hg) => {
                            let tg = hg.teacher.expect("teacher accumulator requested");
                            row2.val_ce = hg.val_ce;
                            row2.grad_phi_norm = hg.phi.norm();
                            row2.g_norm = tg.norm();
                            let u = adam.update(tg.flatten().data())?;
                            teacher_params = teacher_params.axpy(1.0, &teacher_params.with_flat(&u)?)?;
                        }
                        None => row2.val_ce = val_ce(student, &theta, &val2).unwrap_or(f64::NAN),
                    }
                }
                _ => row2.val_ce = val_ce(student, &theta, &val2)?,
            }
            if cfg.record_timing {
                row2.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
            }
            on_row(&row2)?;
            record.rows.push(row2);
            stage += 1;
        }
        snapshots.push(DlnSnapshot {
            epoch: epoch + 1,
            phi: phi.clone(),
        });
    }

    Ok(RunOutput {
        state: RunState {
            theta,
            phi,
            teacher: teacher_params,
        },
        record,
        snapshots,
        skipped,
        sgd_steps,
    })
}

fn skip_non_finite(cfg: &StageConfig, r: Result<Hypergradient>, skipped: &mut usize) -> Result<Option<Hypergradient>> {
    match r {
        Ok(hg) => Ok(Some(hg)),
        Err(e) if e.is_non_finite() && cfg.nonfinite == NonFinitePolicy::Skip => {
            warn!("skipping update: {e}");
            *skipped += 1;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}
