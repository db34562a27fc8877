//! Datasets, IDX files, synthetic 2-D fixtures and the seeded split protocol.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dynloss_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Mnist,
    SyntheticMoons,
    SyntheticBlobs,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Mnist => "mnist",
            Provenance::SyntheticMoons => "synthetic-moons",
            Provenance::SyntheticBlobs => "synthetic-blobs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Features scaled to `[0, 1]`, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "features {:?} for {} labels",
                features.shape(),
                labels.len()
            )));
        }
        crate::models::check_labels(&labels, classes)?;
        Ok(Dataset {
            features,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Features `[idx.len(), dim]` and labels of the selected rows.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Batch {
            x: Tensor::new(vec![idx.len(), d], x).expect("sized to shape"),
            labels,
        }
    }

    /// Every example as one batch.
    pub fn all(&self) -> Batch {
        Batch {
            x: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for (row, label) in self.features.data().chunks(d).zip(&self.labels) {
            for v in row {
                write!(w, "{v},")?;
            }
            writeln!(w, "{label}")?;
        }
        Ok(())
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Images as `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}",
            path.display()
        )));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(Error::Format(format!(
            "{}: truncated, {} of {want} pixel bytes",
            path.display(),
            body.len()
        )));
    }
    Ok((n, rows, cols, body[..want].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}",
            path.display()
        )));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "{}: truncated, {} of {n} labels",
            path.display(),
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair, pixels scaled by 1/255.
///
/// With `subset`, only those digits are kept and relabeled to their position
/// in `subset`, so `[0, 1]` keeps labels as they are.
pub fn load_mnist_idx(images: &Path, labels: &Path, subset: Option<&[u8]>) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let raw_labels = parse_idx_labels(&lbl_bytes, labels)?;
    if raw_labels.len() != n {
        return Err(Error::Format(format!(
            "{} holds {n} images but {} holds {} labels",
            images.display(),
            labels.display(),
            raw_labels.len()
        )));
    }
    let d = rows * cols;
    let classes = match subset {
        Some([]) => return Err(Error::Config("empty class subset".into())),
        Some(s) => s.len(),
        None => raw_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10),
    };
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, &l) in raw_labels.iter().enumerate() {
        let label = match subset {
            Some(s) => match s.iter().position(|&c| c == l) {
                Some(p) => p,
                None => continue,
            },
            None => l as usize,
        };
        x.extend(pixels[i * d..(i + 1) * d].iter().map(|&p| p as f64 / 255.0));
        y.push(label);
    }
    let count = y.len();
    Dataset::new(Tensor::new(vec![count, d], x)?, y, classes, Provenance::Mnist)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Standard file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, split: MnistSplit) -> (PathBuf, PathBuf) {
    let stem = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Moons,
    Blobs,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(SyntheticKind::Moons),
            "blobs" => Ok(SyntheticKind::Blobs),
            other => Err(Error::Config(format!("unknown synthetic dataset kind {other:?}"))),
        }
    }
}

/// Two-class 2-D data; example `i` has label `i % 2`. Coordinates are
/// min-max scaled to `[0, 1]` per axis.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be a finite value >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (x, y) = match kind {
            SyntheticKind::Moons => {
                let t = std::f64::consts::PI * rng.random::<f64>();
                if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                }
            }
            SyntheticKind::Blobs => {
                if label == 0 {
                    (-2.0, -2.0)
                } else {
                    (2.0, 2.0)
                }
            }
        };
        pts.push(x + noise * jitter.sample(&mut rng));
        pts.push(y + noise * jitter.sample(&mut rng));
        labels.push(label);
    }
    for axis in 0..2 {
        let vals = pts.iter().skip(axis).step_by(2);
        let lo = vals.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in pts.iter_mut().skip(axis).step_by(2) {
            *v = (*v - lo) / span;
        }
    }
    let provenance = match kind {
        SyntheticKind::Moons => Provenance::SyntheticMoons,
        SyntheticKind::Blobs => Provenance::SyntheticBlobs,
    };
    Dataset::new(Tensor::new(vec![n, 2], pts)?, labels, 2, provenance)
}

/// SplitMix64 mixing of a base seed with a stream tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Train/validation partition that is redrawn every epoch from the run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitState {
    n: usize,
    ratio: f64,
    seed: u64,
    epoch: u64,
}

impl SplitState {
    pub fn new(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("val_ratio must lie in (0, 1), got {ratio}")));
        }
        if n < 2 {
            return Err(Error::Config(format!("cannot split {n} examples")));
        }
        Ok(SplitState {
            n,
            ratio,
            seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Validation size: `round(n * ratio)`, kept within `[1, n - 1]`.
    pub fn val_len(&self) -> usize {
        ((self.n as f64 * self.ratio).round() as usize).clamp(1, self.n - 1)
    }

    /// The partition for the current epoch, and the state for the next one.
    pub fn redivide(&self) -> (Split, SplitState) {
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.epoch)));
        let train = perm.split_off(self.val_len());
        let next = SplitState {
            epoch: self.epoch + 1,
            ..self.clone()
        };
        (Split { train, val: perm }, next)
    }
}

/// Round-robin batches from a seeded shuffle of `pool`, reshuffled on wrap.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(pool: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = pool.to_vec();
        order.shuffle(&mut rng);
        BatchStream { order, pos: 0, rng }
    }

    pub fn pool_len(&self) -> usize {
        self.order.len()
    }

    /// Next `size` indices (at most the pool size), without repeats inside a batch.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}
