//! Experiment configuration and the orchestration behind the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{derive_seed, load_mnist_idx, make_synthetic, mnist_paths, Dataset, MnistSplit, SyntheticKind};
use crate::engine::{
    run_from, seeds, Models, NonFinitePolicy, RunOutput, RunRecord, RunState, StageConfig, StudentLoss, TeacherKind,
};
use crate::error::{Error, Result};
use crate::models::{Activation, Dln, DlnInput, LstmTeacher, Preprocess, Student};
use crate::params::ParamSet;
use crate::saddle::{run_sweep, SweepConfig, SweepSummary};

/// Version of the CSV layouts written by this module.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic(SyntheticKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentArch {
    /// Leaky-ReLU MLP with `student_hidden` layers.
    Mlp,
    /// Fully-connected 300-100 network.
    Lenet,
}

/// Everything a run needs. Parsed from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub stage: StageConfig,
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    pub classes: Vec<u8>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub noise: f64,
    /// Seed of the synthetic data, separate from the run seed so repeats share a dataset.
    pub data_seed: u64,
    pub student: StudentArch,
    pub student_hidden: Vec<usize>,
    pub dln_hidden: Vec<usize>,
    pub dln_input: DlnInput,
    pub teacher_hidden: Vec<usize>,
    pub preprocess: Preprocess,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stage: StageConfig {
                warm_start_steps: 2000,
                ..StageConfig::default()
            },
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            classes: vec![0, 1],
            synthetic_train: 400,
            synthetic_test: 200,
            noise: 0.1,
            data_seed: 0,
            student: StudentArch::Mlp,
            student_hidden: Student::DEFAULT_HIDDEN.to_vec(),
            dln_hidden: Dln::DEFAULT_HIDDEN.to_vec(),
            dln_input: DlnInput::Probabilities,
            teacher_hidden: vec![64, 64, 64, 1],
            preprocess: Preprocess::LogSign { p: 10.0 },
        }
    }
}

/// Every accepted key, in manifest order.
pub const KEYS: &[&str] = &[
    "dataset",
    "mnist_dir",
    "classes",
    "synthetic_train",
    "synthetic_test",
    "noise",
    "data_seed",
    "student",
    "student_hidden",
    "dln_hidden",
    "dln_input",
    "teacher",
    "teacher_hidden",
    "preprocess",
    "preprocess_p",
    "warm_start",
    "student_loss",
    "steps",
    "iterations",
    "epochs",
    "eta",
    "gamma",
    "teacher_lr",
    "weight",
    "val_ratio",
    "train_batch",
    "val_batch",
    "seed",
    "nonfinite",
    "record_timing",
];

fn invalid(key: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("`{key}`: {msg}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| invalid(key, format!("cannot parse {value:?}: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.stage;
        match key {
            "dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetKind::Mnist,
                    other => DatasetKind::Synthetic(
                        other
                            .parse()
                            .map_err(|_| invalid(key, format!("expected mnist, moons or blobs, got {other:?}")))?,
                    ),
                }
            }
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "classes" => self.classes = list(key, value)?,
            "synthetic_train" => self.synthetic_train = num(key, value)?,
            "synthetic_test" => self.synthetic_test = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "student" => {
                self.student = match value {
                    "mlp" => StudentArch::Mlp,
                    "lenet" => StudentArch::Lenet,
                    other => return Err(invalid(key, format!("expected mlp or lenet, got {other:?}"))),
                }
            }
            "student_hidden" => self.student_hidden = list(key, value)?,
            "dln_hidden" => self.dln_hidden = list(key, value)?,
            "dln_input" => {
                self.dln_input = match value {
                    "probabilities" => DlnInput::Probabilities,
                    "scores" => DlnInput::Scores,
                    other => return Err(invalid(key, format!("expected probabilities or scores, got {other:?}"))),
                }
            }
            "teacher" => s.teacher = value.parse::<TeacherKind>().map_err(|e| invalid(key, e))?,
            "teacher_hidden" => self.teacher_hidden = list(key, value)?,
            "preprocess" => {
                let p = match self.preprocess {
                    Preprocess::LogSign { p } => p,
                    Preprocess::Raw => 10.0,
                };
                self.preprocess = match value {
                    "logsign" => Preprocess::LogSign { p },
                    "raw" => Preprocess::Raw,
                    other => return Err(invalid(key, format!("expected logsign or raw, got {other:?}"))),
                }
            }
            "preprocess_p" => {
                let p: f64 = num(key, value)?;
                match &mut self.preprocess {
                    Preprocess::LogSign { p: q } => *q = p,
                    Preprocess::Raw => return Err(invalid(key, "only applies to preprocess = logsign")),
                }
            }
            "warm_start" => s.warm_start_steps = num(key, value)?,
            "student_loss" => s.student_loss = value.parse::<StudentLoss>().map_err(|e| invalid(key, e))?,
            "steps" => s.steps = num(key, value)?,
            "iterations" => s.iterations = num(key, value)?,
            "epochs" => s.epochs = num(key, value)?,
            "eta" => s.eta = num(key, value)?,
            "gamma" => s.gamma = num(key, value)?,
            "teacher_lr" => s.teacher_lr = num(key, value)?,
            "weight" => s.weight = num(key, value)?,
            "val_ratio" => s.val_ratio = num(key, value)?,
            "train_batch" => s.train_batch = num(key, value)?,
            "val_batch" => s.val_batch = num(key, value)?,
            "seed" => s.seed = num(key, value)?,
            "nonfinite" => s.nonfinite = value.parse::<NonFinitePolicy>().map_err(|e| invalid(key, e))?,
            "record_timing" => s.record_timing = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    /// The value of every key, as it would be written in a config file.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.stage;
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "dataset" => match self.dataset {
                        DatasetKind::Mnist => "mnist".to_string(),
                        DatasetKind::Synthetic(SyntheticKind::Moons) => "moons".to_string(),
                        DatasetKind::Synthetic(SyntheticKind::Blobs) => "blobs".to_string(),
                    },
                    "mnist_dir" => self.mnist_dir.display().to_string(),
                    "classes" => join(&self.classes),
                    "synthetic_train" => self.synthetic_train.to_string(),
                    "synthetic_test" => self.synthetic_test.to_string(),
                    "noise" => self.noise.to_string(),
                    "data_seed" => self.data_seed.to_string(),
                    "student" => match self.student {
                        StudentArch::Mlp => "mlp".to_string(),
                        StudentArch::Lenet => "lenet".to_string(),
                    },
                    "student_hidden" => join(&self.student_hidden),
                    "dln_hidden" => join(&self.dln_hidden),
                    "dln_input" => match self.dln_input {
                        DlnInput::Probabilities => "probabilities".to_string(),
                        DlnInput::Scores => "scores".to_string(),
                    },
                    "teacher" => s.teacher.to_string(),
                    "teacher_hidden" => join(&self.teacher_hidden),
                    "preprocess" => match self.preprocess {
                        Preprocess::LogSign { .. } => "logsign".to_string(),
                        Preprocess::Raw => "raw".to_string(),
                    },
                    "preprocess_p" => match self.preprocess {
                        Preprocess::LogSign { p } => p.to_string(),
                        Preprocess::Raw => String::new(),
                    },
                    "warm_start" => s.warm_start_steps.to_string(),
                    "student_loss" => s.student_loss.to_string(),
                    "steps" => s.steps.to_string(),
                    "iterations" => s.iterations.to_string(),
                    "epochs" => s.epochs.to_string(),
                    "eta" => s.eta.to_string(),
                    "gamma" => s.gamma.to_string(),
                    "teacher_lr" => s.teacher_lr.to_string(),
                    "weight" => s.weight.to_string(),
                    "val_ratio" => s.val_ratio.to_string(),
                    "train_batch" => s.train_batch.to_string(),
                    "val_batch" => s.val_batch.to_string(),
                    "seed" => s.seed.to_string(),
                    "nonfinite" => s.nonfinite.to_string(),
                    "record_timing" => s.record_timing.to_string(),
                    _ => unreachable!("every key is listed"),
                };
                (k, v)
            })
            .collect()
    }

    /// Config-file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, v)| !(v.is_empty() && *k == "preprocess_p"))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        if let DatasetKind::Mnist = self.dataset {
            let mut sorted = self.classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.classes.len() || self.classes.len() < 2 || self.classes.iter().any(|&c| c > 9) {
                return Err(invalid("classes", "need at least two distinct digits in 0..=9"));
            }
            for split in [MnistSplit::Train, MnistSplit::Test] {
                let (images, labels) = mnist_paths(&self.mnist_dir, split);
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(invalid("mnist_dir", format!("{} not found", p.display())));
                    }
                }
            }
        } else if self.synthetic_train < 2 || self.synthetic_test < 2 {
            return Err(invalid("synthetic_train", "synthetic splits need at least 2 examples"));
        }
        for (key, dims) in [
            ("student_hidden", &self.student_hidden),
            ("dln_hidden", &self.dln_hidden),
            ("teacher_hidden", &self.teacher_hidden),
        ] {
            if dims.contains(&0) {
                return Err(invalid(key, "layer sizes must be positive"));
            }
        }
        if self.teacher_hidden.last() != Some(&1) {
            return Err(invalid("teacher_hidden", "the last layer must have one unit"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist => self.classes.len(),
            DatasetKind::Synthetic(_) => 2,
        }
    }

    /// Train and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Mnist => {
                let load = |split| {
                    let (images, labels) = mnist_paths(&self.mnist_dir, split);
                    load_mnist_idx(&images, &labels, Some(&self.classes))
                };
                Ok((load(MnistSplit::Train)?, load(MnistSplit::Test)?))
            }
            DatasetKind::Synthetic(kind) => {
                let n = self.synthetic_train + self.synthetic_test;
                let all = make_synthetic(kind, n, self.noise, derive_seed(self.data_seed, seeds::SYNTHETIC))?;
                let part = |range: std::ops::Range<usize>| {
                    let b = all.batch(&range.collect::<Vec<_>>());
                    Dataset::new(b.x, b.labels, all.classes(), all.provenance())
                };
                Ok((part(0..self.synthetic_train)?, part(self.synthetic_train..n)?))
            }
        }
    }

    pub fn dln(&self) -> Dln {
        Dln::new(&self.dln_hidden, Activation::LeakyRelu(0.01), self.stage.weight).with_input(self.dln_input)
    }

    pub fn models(&self, input_dim: usize) -> Result<Models> {
        let classes = self.classes();
        let student = match self.student {
            StudentArch::Mlp => Student::new(input_dim, &self.student_hidden, classes),
            StudentArch::Lenet => Student::lenet(input_dim, classes),
        };
        Ok(Models {
            student,
            dln: self.dln(),
            teacher: LstmTeacher::new(&self.teacher_hidden, self.preprocess)?,
        })
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub output: RunOutput,
    pub train_len: usize,
    pub test_len: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn manifest(cfg: &ExperimentConfig, models: &Models, train: &Dataset, test: &Dataset, artifacts: &[String]) -> String {
    let config: BTreeMap<&str, String> = cfg.entries().into_iter().collect();
    let value = serde_json::json!({
        "tool": "dynloss",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.stage.seed,
        "config": config,
        "schemas": {
            "version": SCHEMA_VERSION,
            "record.csv": RunRecord::HEADER,
        },
        "dataset": {
            "provenance": train.provenance().to_string(),
            "classes": train.classes(),
            "train": train.len(),
            "test": test.len(),
        },
        "params": {
            "student": models.student.mlp().num_params(),
            "dln": models.dln.mlp().num_params(),
            "teacher": models.teacher.num_params(),
        },
        "artifacts": artifacts,
    });
    let mut text = serde_json::to_string_pretty(&value).expect("manifest serializes");
    text.push('\n');
    text
}

/// Runs one experiment, writing `record.csv` row by row, then the final
/// checkpoints and one DLN snapshot per epoch.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.load_data()?;
    let models = cfg.models(train_set.dim())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut artifacts = vec![
        "manifest.json".to_string(),
        "config.txt".to_string(),
        "record.csv".to_string(),
        "student.ckpt".to_string(),
        "dln.ckpt".to_string(),
        "teacher.ckpt".to_string(),
    ];
    artifacts.extend((0..=cfg.stage.epochs).map(|e| format!("dln_epoch{e}.ckpt")));
    write_all(
        &out.join("manifest.json"),
        manifest(cfg, &models, &train_set, &test_set, &artifacts).as_bytes(),
    )?;
    write_all(&out.join("config.txt"), cfg.to_text().as_bytes())?;

    let record_path = out.join("record.csv");
    let mut record = create(&record_path)?;
    writeln!(record, "{}", RunRecord::HEADER).map_err(|e| Error::io(&record_path, e))?;
    let init = RunState::init(&models, &cfg.stage)?;
    let output = run_from(&cfg.stage, &models, init, &train_set, &test_set, |row| {
        RunRecord::write_row(&mut record, row)
            .and_then(|_| record.flush())
            .map_err(|e| Error::io(&record_path, e))
    })?;
    drop(record);

    output.state.theta.save(&out.join("student.ckpt"))?;
    output.state.phi.save(&out.join("dln.ckpt"))?;
    output.state.teacher.save(&out.join("teacher.ckpt"))?;
    for snap in &output.snapshots {
        snap.phi.save(&out.join(format!("dln_epoch{}.ckpt", snap.epoch)))?;
    }
    Ok(TrainOutcome {
        output,
        train_len: train_set.len(),
        test_len: test_set.len(),
    })
}

/// Ablation axes and the config key each one varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Ratio,
    Length,
    Optimizer,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::Ratio => "val_ratio",
            Axis::Length => "steps",
            Axis::Optimizer => "teacher",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Axis::Ratio),
            "length" => Ok(Axis::Length),
            "optimizer" => Ok(Axis::Optimizer),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Ratio => "ratio",
            Axis::Length => "length",
            Axis::Optimizer => "optimizer",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub value: String,
    pub repeat: usize,
    pub seed: u64,
    /// Final test accuracy and median wall time per outer iteration, or the error.
    pub result: std::result::Result<(f64, f64), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub median_acc: f64,
    pub mean_acc: f64,
    pub median_iter_ms: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Seed of repeat `r`; shared by every value so the comparison is paired.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    derive_seed(derive_seed(base, seeds::ABLATION), repeat as u64)
}

/// One full run per `(value, repeat)`, in parallel. Failed runs are
/// recorded and the sweep continues.
pub fn ablate(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    repeats: usize,
    out: &Path,
) -> Result<(Vec<AblationRun>, Vec<AblationSummary>)> {
    if values.is_empty() || repeats == 0 {
        return Err(Error::Config(
            "an ablation needs at least one value and one repeat".into(),
        ));
    }
    let mut jobs = Vec::new();
    for value in values {
        for repeat in 0..repeats {
            let mut c = cfg.clone();
            c.set(axis.key(), value)?;
            c.stage.seed = repeat_seed(cfg.stage.seed, repeat);
            c.validate()?;
            jobs.push((value.clone(), repeat, c));
        }
    }
    let (train_set, test_set) = cfg.load_data()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let runs: Vec<(AblationRun, Option<RunRecord>)> = jobs
        .into_par_iter()
        .map(|(value, repeat, c)| {
            let seed = c.stage.seed;
            let run = || -> Result<RunOutput> {
                let models = c.models(train_set.dim())?;
                let init = RunState::init(&models, &c.stage)?;
                run_from(&c.stage, &models, init, &train_set, &test_set, |_| Ok(()))
            };
            match run() {
                Ok(o) => {
                    let acc = o.record.final_accuracy().unwrap_or(f64::NAN);
                    let ms = o.record.median_iteration_ms().unwrap_or(f64::NAN);
                    let r = AblationRun {
                        value,
                        repeat,
                        seed,
                        result: Ok((acc, ms)),
                    };
                    (r, Some(o.record))
                }
                Err(e) => (
                    AblationRun {
                        value,
                        repeat,
                        seed,
                        result: Err(e.to_string()),
                    },
                    None,
                ),
            }
        })
        .collect();

    for (r, record) in &runs {
        if let Some(record) = record {
            let path = out.join(format!("run_{}_{}.csv", sanitize(&r.value), r.repeat));
            let mut w = create(&path)?;
            record
                .write_csv(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    let runs: Vec<AblationRun> = runs.into_iter().map(|(r, _)| r).collect();
    let summaries: Vec<AblationSummary> = values
        .iter()
        .map(|v| {
            let ok: Vec<(f64, f64)> = runs
                .iter()
                .filter(|r| &r.value == v)
                .filter_map(|r| r.result.clone().ok())
                .collect();
            let accs: Vec<f64> = ok.iter().map(|x| x.0).collect();
            let ms: Vec<f64> = ok.iter().map(|x| x.1).collect();
            AblationSummary {
                value: v.clone(),
                runs: repeats,
                failed: repeats - ok.len(),
                median_acc: median(&accs),
                mean_acc: if accs.is_empty() {
                    f64::NAN
                } else {
                    accs.iter().sum::<f64>() / accs.len() as f64
                },
                median_iter_ms: median(&ms),
            }
        })
        .collect();

    let runs_path = out.join("runs.csv");
    let mut w = create(&runs_path)?;
    let mut body = String::from("axis,value,repeat,seed,status,final_acc,median_iter_ms\n");
    for r in &runs {
        match &r.result {
            Ok((acc, ms)) => body.push_str(&format!("{axis},{},{},{},ok,{acc},{ms}\n", r.value, r.repeat, r.seed)),
            Err(e) => body.push_str(&format!(
                "{axis},{},{},{},\"{}\",,\n",
                r.value,
                r.repeat,
                r.seed,
                e.replace('"', "'")
            )),
        }
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&runs_path, e))?;

    let summary_path = out.join("summary.csv");
    let mut body = String::from("axis,value,runs,failed,median_acc,mean_acc,median_iter_ms\n");
    for s in &summaries {
        body.push_str(&format!(
            "{axis},{},{},{},{},{},{}\n",
            s.value, s.runs, s.failed, s.median_acc, s.mean_acc, s.median_iter_ms
        ));
    }
    write_all(&summary_path, body.as_bytes())?;
    Ok((runs, summaries))
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// What the two grid axes measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceAxes {
    /// Student scores `(correct, wrong)`, passed through the DLN's input transform.
    Scores,
    /// The network's own inputs.
    Inputs,
}

impl FromStr for SurfaceAxes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scores" => Ok(SurfaceAxes::Scores),
            "inputs" => Ok(SurfaceAxes::Inputs),
            _ => Err(Error::Config(format!("`axes`: expected scores or inputs, got `{s}`"))),
        }
    }
}

/// Grid over `(prediction0, prediction1)`: the correct-class value on axis 0
/// and the wrong-class value on axis 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub axes: SurfaceAxes,
}

impl GridSpec {
    /// Student scores over `[-3, 3]²`.
    pub fn scores() -> Self {
        GridSpec {
            min: -3.0,
            max: 3.0,
            points: 21,
            axes: SurfaceAxes::Scores,
        }
    }

    /// The network's input domain: `[0, 1]²` for probabilities, `[-3, 3]²` for scores.
    pub fn domain(input: DlnInput) -> Self {
        match input {
            DlnInput::Probabilities => GridSpec {
                min: 0.0,
                max: 1.0,
                points: 21,
                axes: SurfaceAxes::Inputs,
            },
            DlnInput::Scores => Self::wide(),
        }
    }

    /// Network inputs over `[-3, 3]²`.
    pub fn wide() -> Self {
        GridSpec {
            axes: SurfaceAxes::Inputs,
            ..Self::scores()
        }
    }

    pub fn axis(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        (0..self.points)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.points - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || !(self.min.is_finite() && self.max.is_finite() && self.max >= self.min) {
            return Err(Error::Config(format!("invalid surface grid {self:?}")));
        }
        Ok(())
    }
}

/// DLN values on a grid; `z[r][c]` is the value at `(x0[c], x1[r])`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceGrid {
    pub epoch: usize,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl SurfaceGrid {
    pub fn is_finite(&self) -> bool {
        self.z.iter().flatten().all(|v| v.is_finite())
    }

    /// Fraction of rows along which `z` never increases with `x0`.
    pub fn non_increasing_rows(&self) -> f64 {
        if self.z.is_empty() {
            return 0.0;
        }
        let good = self.z.iter().filter(|row| row.windows(2).all(|w| w[1] <= w[0])).count();
        good as f64 / self.z.len() as f64
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("surface serializes");
        s.push('\n');
        s
    }
}

pub fn surface_grid(dln: &Dln, phi: &ParamSet, epoch: usize, spec: GridSpec) -> Result<SurfaceGrid> {
    spec.validate()?;
    dln.mlp().check(phi)?;
    let axis = spec.axis();
    let points: Vec<[f64; 2]> = axis.iter().flat_map(|&b| axis.iter().map(move |&a| [a, b])).collect();
    let values = match spec.axes {
        SurfaceAxes::Scores => dln.eval_scores(phi, &points)?,
        SurfaceAxes::Inputs => dln.eval_points(phi, &points)?,
    };
    let z = values.chunks(axis.len()).map(<[f64]>::to_vec).collect();
    Ok(SurfaceGrid {
        epoch,
        x0: axis.clone(),
        x1: axis,
        z,
    })
}

/// Epoch tags of the `dln_epoch{e}.ckpt` snapshots in `dir`, ascending.
pub fn snapshot_epochs(dir: &Path) -> Result<Vec<usize>> {
    let mut epochs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(e) = name
            .strip_prefix("dln_epoch")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|d| d.parse().ok())
        {
            epochs.push(e);
        }
    }
    epochs.sort_unstable();
    Ok(epochs)
}

/// Writes `surface_epoch{e}.json` for every DLN snapshot of a training run.
pub fn export_surfaces(dln: &Dln, run_dir: &Path, spec: GridSpec, out: &Path) -> Result<Vec<SurfaceGrid>> {
    let epochs = snapshot_epochs(run_dir)?;
    if epochs.is_empty() {
        return Err(Error::Config(format!(
            "no dln_epoch*.ckpt snapshots in {}",
            run_dir.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    epochs
        .into_iter()
        .map(|e| {
            let phi = ParamSet::load(&run_dir.join(format!("dln_epoch{e}.ckpt")))?;
            let grid = surface_grid(dln, &phi, e, spec)?;
            write_all(&out.join(format!("surface_epoch{e}.json")), grid.to_json().as_bytes())?;
            Ok(grid)
        })
        .collect()
}

/// Runs the saddle sweep and writes `saddle.csv`.
pub fn saddle(cfg: &SweepConfig, out: &Path) -> Result<SweepSummary> {
    let summary = run_sweep(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("saddle.csv");
    let mut w = create(&path)?;
    summary
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
