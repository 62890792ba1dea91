//! Binary checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "PPINVCKP"
//! version    u32
//! config     32 bytes SHA-256 of the semantic config
//! precision  u8       0 = f32, 1 = f64 (the training precision)
//! text       u32 length, UTF-8 TOML of the full config
//! count      u32 number of tensors
//! tensor     u32 name length, name, u8 dtype, u64 rows, u64 cols, row-major data
//! ...
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! Tensor names used by the trainer: `pca.mean`, `pca.components`,
//! `bank.xp`, `bank.hp.{i}`, `bank.yp`, `bank.rho.{i}`, `weights.{i}`, and
//! `weights.0.pixels` when a PCA basis was used.

use std::path::Path;

use protopinv::data::PcaBasis;
use protopinv::model::{PrototypeBank, SolvedWeights};
use protopinv::{Matrix, Precision, Scalar};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"PPINVCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Matrix<f32>),
    F64(Matrix<f64>),
}

impl Tensor {
    /// Stores `m` in its own precision, so reading it back is exact.
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        match T::PRECISION {
            Precision::Single => Tensor::F32(m.cast()),
            Precision::Double => Tensor::F64(m.cast()),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            Tensor::F32(_) => Precision::Single,
            Tensor::F64(_) => Precision::Double,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::F32(m) => m.shape(),
            Tensor::F64(m) => m.shape(),
        }
    }
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::Single => 0,
        Precision::Double => 1,
    }
}

fn precision_from_tag(tag: u8) -> Result<Precision, CliError> {
    match tag {
        0 => Ok(Precision::Single),
        1 => Ok(Precision::Double),
        t => Err(CliError::Checkpoint(format!("unknown precision tag {t}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub precision: Precision,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Checkpoint("string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], precision: Precision, config_text: String) -> Self {
        Self {
            config_hash,
            precision,
            config_text,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.tensors.push((name.into(), Tensor::from_matrix(m)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The named tensor in precision `T`; the stored dtype must match.
    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Matrix<T>, CliError> {
        let t = self
            .get(name)
            .ok_or_else(|| CliError::Checkpoint(format!("missing tensor '{name}'")))?;
        if t.precision() != T::PRECISION {
            return Err(CliError::Checkpoint(format!(
                "tensor '{name}' is stored as {:?}, requested {:?}",
                t.precision(),
                T::PRECISION
            )));
        }
        Ok(match t {
            Tensor::F32(m) => m.cast(),
            Tensor::F64(m) => m.cast(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.push(precision_tag(self.precision));
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(precision_tag(t.precision()));
            let (r, c) = t.shape();
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            match t {
                Tensor::F32(m) => m
                    .as_slice()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Tensor::F64(m) => m
                    .as_slice()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        if bytes.len() < r.pos + 32 {
            return Err(CliError::Checkpoint("truncated file".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(CliError::Checkpoint("checksum mismatch; the file is corrupt".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let precision = precision_from_tag(r.u8()?)?;
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = precision_from_tag(r.u8()?)?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| CliError::Checkpoint(format!("tensor '{name}' has impossible shape")))?;
            let t = match dtype {
                Precision::Single => {
                    let raw = r.take(
                        n.checked_mul(4)
                            .ok_or_else(|| CliError::Checkpoint("tensor too large".into()))?,
                    )?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Tensor::F32(Matrix::from_vec(rows, cols, data))
                }
                Precision::Double => {
                    let raw = r.take(
                        n.checked_mul(8)
                            .ok_or_else(|| CliError::Checkpoint("tensor too large".into()))?,
                    )?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Tensor::F64(Matrix::from_vec(rows, cols, data))
                }
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            precision,
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn push_pca(&mut self, pca: &PcaBasis) {
        self.push("pca.mean", &Matrix::from_vec(1, pca.input_dim(), pca.mean().to_vec()));
        self.push("pca.components", pca.components());
    }

    pub fn pca(&self) -> Result<Option<PcaBasis>, CliError> {
        if self.get("pca.components").is_none() {
            return Ok(None);
        }
        let mean = self.matrix::<f64>("pca.mean")?.into_vec();
        let components = self.matrix::<f64>("pca.components")?;
        Ok(Some(PcaBasis::from_parts(mean, components)?))
    }

    pub fn push_bank<T: Scalar>(&mut self, bank: &PrototypeBank<T>) {
        self.push("bank.xp", &bank.xp);
        for (i, h) in bank.hp.iter().enumerate() {
            self.push(format!("bank.hp.{i}"), h);
        }
        self.push("bank.yp", &bank.yp);
        for (i, r) in bank.rho.iter().enumerate() {
            self.push(format!("bank.rho.{i}"), r);
        }
    }

    pub fn bank<T: Scalar>(&self) -> Result<PrototypeBank<T>, CliError> {
        let count = |prefix: &str| {
            (0..)
                .take_while(|i| self.get(&format!("{prefix}.{i}")).is_some())
                .count()
        };
        let hp = (0..count("bank.hp"))
            .map(|i| self.matrix(&format!("bank.hp.{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let rho = (0..count("bank.rho"))
            .map(|i| self.matrix(&format!("bank.rho.{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        if hp.is_empty() || rho.len() != hp.len() + 1 {
            return Err(CliError::Checkpoint(format!(
                "bank has {} hidden targets and {} ridge parameters",
                hp.len(),
                rho.len()
            )));
        }
        Ok(PrototypeBank {
            xp: self.matrix("bank.xp")?,
            hp,
            yp: self.matrix("bank.yp")?,
            rho,
        })
    }

    /// Materialised weights, plus the first layer lifted to pixels when a
    /// basis is given.
    pub fn push_weights<T: Scalar>(
        &mut self,
        weights: &SolvedWeights<T>,
        pca: Option<&PcaBasis>,
    ) -> Result<(), CliError> {
        for (i, w) in weights.weights.iter().enumerate() {
            self.push(format!("weights.{i}"), w);
        }
        if let Some(basis) = pca {
            self.push("weights.0.pixels", &basis.back_project_w1(&weights.weights[0])?);
        }
        Ok(())
    }

    pub fn weight_matrices<T: Scalar>(&self, pixels: bool) -> Result<Vec<Matrix<T>>, CliError> {
        let n = (0..)
            .take_while(|i| self.get(&format!("weights.{i}")).is_some())
            .count();
        if n == 0 {
            return Err(CliError::Checkpoint("no materialised weights".into()));
        }
        (0..n)
            .map(|i| {
                if i == 0 && pixels {
                    self.matrix("weights.0.pixels")
                } else {
                    self.matrix(&format!("weights.{i}"))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new([7; 32], Precision::Single, "[model]\nprototypes = 3\n".into());
        c.push(
            "a",
            &Matrix::from_vec(2, 3, vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0, 1e-30, -7.25]),
        );
        c.push("b", &Matrix::from_vec(1, 2, vec![std::f64::consts::PI, -1e300]));
        c.push("empty", &Matrix::<f32>::zeros(0, 4));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.matrix::<f64>("b").unwrap().as_slice()[0].to_bits(),
            std::f64::consts::PI.to_bits()
        );
        assert_eq!(back.get("empty").unwrap().shape(), (0, 4));
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(&bytes[12..44], &[7; 32]);
    }

    #[test]
    fn damage_is_detected() {
        let good = sample().to_bytes();
        let mut flipped = good.clone();
        flipped[60] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CliError::Checkpoint(m)) if m.contains("checksum")));
        let mut wrong_version = good.clone();
        wrong_version[8] = 9;
        assert!(
            matches!(Checkpoint::from_bytes(&wrong_version), Err(CliError::Checkpoint(m)) if m.contains("version"))
        );
        assert!(Checkpoint::from_bytes(&good[..good.len() - 5]).is_err());
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }

    #[test]
    fn dtype_must_match_the_request() {
        let c = sample();
        assert!(c.matrix::<f64>("a").is_err());
        assert!(c.matrix::<f32>("missing").is_err());
    }
}
