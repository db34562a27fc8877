//! Named parameter collections and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"L2TD" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (utf-8) | u32 rank | u64 dims[rank] | f64 data[product(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dynloss_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"L2TD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// An ordered list of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// All values concatenated in order, as a rank-1 tensor.
    pub fn flatten(&self) -> Tensor {
        let mut flat = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        Tensor::vector(flat)
    }

    /// A parameter set with this layout holding `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "{} values for a parameter set of {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in self.iter() {
            let n = t.numel();
            out.push(
                name,
                Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &ParamSet) -> Result<ParamSet> {
        if !self.same_layout(other) {
            return Err(Error::Shape("axpy on parameter sets with different layouts".into()));
        }
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.axpy(alpha, b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ParamSet {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every tensor as a differentiable leaf.
    pub fn register(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.var(t.clone())).collect()
    }

    /// Records every tensor as a constant.
    pub fn constants(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ParamSet> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            out.push(name, Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        ParamSet::read_from(BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push(
            "a.weight",
            Tensor::matrix(2, 3, vec![1., -2., 3.5, 0., 1e-300, -7.25]).unwrap(),
        );
        p.push("a.bias", Tensor::vector(vec![0.5, -0.5, 2.0]));
        p.push("s", Tensor::scalar(4.0));
        p
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"L2TD");
        assert_eq!(ParamSet::read_from(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn checkpoint_header_layout() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::vector(vec![1.0]));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let mut expect = b"L2TD".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'x');
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ParamSet::read_from(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(ParamSet::read_from(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn flatten_and_refill() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat.numel(), 10);
        assert_eq!(p.with_flat(flat.data()).unwrap(), p);
        assert!(p.with_flat(&[0.0; 3]).is_err());
    }
}
