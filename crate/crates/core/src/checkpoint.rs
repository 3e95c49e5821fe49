//! Binary checkpoints.
//!
//! Layout, little-endian: magic `LWN1`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! dims and `f32` values in row-major order. Trailing bytes are rejected.
//!
//! A checkpoint stores values only. Loading rebuilds the network from its
//! [`ArchSpec`] and requires every name and shape to line up, so the
//! architecture travels in a JSON sidecar next to the weights.

use std::fs;
use std::path::{Path, PathBuf};

use crate::arch::{parse_arch_file, write_arch_file, ArchSpec};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::tensor::Scalar;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"LWN1";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &mut Model<T>) -> Result<Vec<u8>> {
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("tensor name '{}' too long", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let dims = p.tensor.dims();
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Parse a checkpoint without reference to any model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            detail: "bad magic, expected LWN1".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: start + 2,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint {
                offset: start,
                detail: format!("tensor '{name}' has overflowing dims {dims:?}"),
            })?;
        let raw = r.take(numel, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(StoredTensor { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

/// Build a fresh model from `spec` and fill it from `bytes`. Every tensor is
/// checked before anything is written, so an error never leaves a
/// half-loaded model behind.
pub fn model_from_checkpoint<T: Scalar>(spec: &ArchSpec, bytes: &[u8]) -> Result<Model<T>> {
    let stored = decode_checkpoint(bytes)?;
    let mut model = build_model::<T>(spec, 0)?;
    {
        let params = model.params();
        if params.len() != stored.len() {
            return Err(Error::Checkpoint {
                offset: 8,
                detail: format!(
                    "file holds {} tensors, architecture '{}' needs {}",
                    stored.len(),
                    spec.name,
                    params.len()
                ),
            });
        }
        for (p, s) in params.iter().zip(&stored) {
            if p.name != s.name || p.tensor.dims() != s.dims.as_slice() {
                return Err(Error::Checkpoint {
                    offset: 0,
                    detail: format!(
                        "tensor '{}' {:?} does not match expected '{}' {:?}",
                        s.name,
                        s.dims,
                        p.name,
                        p.tensor.dims()
                    ),
                });
            }
        }
    }
    for (p, s) in model.params().into_iter().zip(stored) {
        for (d, v) in p.tensor.data_mut().iter_mut().zip(s.values) {
            *d = T::lit(v as f64);
        }
    }
    Ok(model)
}

pub fn arch_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

/// Write weights to `path` and the architecture to `path.arch.json`.
pub fn checkpoint_save<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_arch_file(model.spec(), arch_sidecar(path))
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let spec = parse_arch_file(arch_sidecar(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(&spec, &bytes)
}

/// How a checkpoint was produced: the preprocessing and class names
/// evaluation has to reproduce. Stored as `path.run.json`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub per_class: Option<usize>,
}

pub fn run_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

pub fn write_run_record(record: &RunRecord, checkpoint: &Path) -> Result<()> {
    let path = run_sidecar(checkpoint);
    let text = serde_json::to_string_pretty(record).expect("record is serializable");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_run_record(checkpoint: &Path) -> Result<RunRecord> {
    let path = run_sidecar(checkpoint);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
