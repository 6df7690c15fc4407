//! Binary checkpoints holding the student and teacher parameter sets.
//!
//! Layout: `b"SECL"`, `u32` version, `u32` record count, then per record
//! `u32` name length, name bytes, `u8` dtype tag, `u32` rank, `u64` extents,
//! little-endian payload. All integers are little-endian. The architecture
//! travels as an f64 record named `meta.arch`.

use std::fs;
use std::path::Path;

use secl_autodiff::{DType, Scalar, Tensor};
use thiserror::Error;

use crate::model::{ArchConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"SECL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {0}")]
    UnknownDType(u8),
    #[error("tensor {name} stored as {found:?}, expected {expected:?}")]
    DTypeMismatch { name: String, expected: DType, found: DType },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: shape {found:?} does not match architecture {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed record: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
}

fn arch_record(a: &ArchConfig) -> Vec<f64> {
    let mut v: Vec<f64> = a.extents.iter().map(|&e| e as f64).collect();
    v.extend([a.levels, a.base_channels, a.hidden_dim, a.emb_dim, a.classes].map(|x| x as f64));
    v
}

fn arch_from_record(v: &[f64]) -> Result<ArchConfig> {
    if v.len() != 8 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(CheckpointError::Malformed("meta.arch".into()));
    }
    let u = |i: usize| v[i] as usize;
    let arch = ArchConfig {
        extents: [u(0), u(1), u(2)],
        levels: u(3),
        base_channels: u(4),
        hidden_dim: u(5),
        emb_dim: u(6),
        classes: u(7),
    };
    arch.validate().map_err(CheckpointError::Malformed)?;
    Ok(arch)
}

fn push_record(out: &mut Vec<u8>, name: &str, dtype: DType, shape: &[usize], payload: impl FnOnce(&mut Vec<u8>)) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(dtype.tag());
    out.extend((shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend((e as u64).to_le_bytes());
    }
    payload(out);
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(String, &Tensor<T>)> = Vec::new();
        for (side, p) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (n, t) in p.named() {
                records.push((format!("{side}.{n}"), t));
            }
        }
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((records.len() as u32 + 1).to_le_bytes());
        let arch = arch_record(&self.student.arch);
        push_record(&mut out, "meta.arch", DType::F64, &[arch.len()], |o| {
            arch.iter().for_each(|v| v.extend_le_bytes(o))
        });
        for (name, t) in records {
            push_record(&mut out, &name, T::DTYPE, t.shape(), |o| {
                t.data().iter().for_each(|v| v.extend_le_bytes(o))
            });
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut arch = None;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or(CheckpointError::UnknownDType(tag))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or(CheckpointError::Truncated(r.pos))?)?;
            if name == "meta.arch" {
                if dtype != DType::F64 {
                    return Err(CheckpointError::Malformed("meta.arch must be f64".into()));
                }
                let v: Vec<f64> = raw.chunks_exact(8).map(f64::from_le_slice).collect();
                arch = Some(arch_from_record(&v)?);
                continue;
            }
            if dtype != T::DTYPE {
                return Err(CheckpointError::DTypeMismatch {
                    name,
                    expected: T::DTYPE,
                    found: dtype,
                });
            }
            let data = raw.chunks_exact(dtype.size_of()).map(T::from_le_slice).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let arch = arch.ok_or_else(|| CheckpointError::Missing("meta.arch".into()))?;
        let mut take = |prefix: &str, shapes: Vec<(String, Vec<usize>)>| -> Result<Vec<Tensor<T>>> {
            shapes
                .into_iter()
                .map(|(n, shape)| {
                    let key = format!("{prefix}.{n}");
                    let t = tensors.remove(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(CheckpointError::Shape {
                            name: key,
                            expected: shape,
                            found: t.shape().to_vec(),
                        });
                    }
                    Ok(t)
                })
                .collect()
        };
        let student = ModelParams {
            arch: arch.clone(),
            encoder: take("student", arch.encoder_shapes())?,
            projector: take("student", arch.projector_shapes())?,
            decoder: Some(take("student", arch.decoder_shapes())?),
        };
        let teacher = ModelParams {
            arch: arch.clone(),
            encoder: take("teacher", arch.encoder_shapes())?,
            projector: take("teacher", arch.projector_shapes())?,
            decoder: None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
        }
        Ok(Self { student, teacher })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
