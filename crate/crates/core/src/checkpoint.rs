//! Binary tensor container used for model checkpoints and corpus caches.
//!
//! Layout (little-endian): magic `EXITWSE1`, u32 version, u32 architecture
//! hash, u32 tensor count, then per tensor a u32-length-prefixed UTF-8 name,
//! u8 rank, u64 extents, and the f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiExitModel};
use crate::tensor::Scalar;

pub const MAGIC: [u8; 8] = *b"EXITWSE1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub arch_hash: u32,
    pub tensors: Vec<TensorRecord>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 8] = r.take(8, "magic")?.try_into().expect("8 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let arch_hash = r.u32("architecture hash")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| {
                Error::TensorTable {
                    name: format!("#{i}"),
                    detail: "name is not valid UTF-8".into(),
                }
            })?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "extent")?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| Error::TensorTable {
                    name: name.clone(),
                    detail: format!("extent {d} too large"),
                })?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::TensorTable {
                    name: name.clone(),
                    detail: "payload size overflows".into(),
                })?;
            let data = r
                .take(numel, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorRecord { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::TensorTable {
                name: "<trailer>".into(),
                detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { arch_hash, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl<T: Scalar> MultiExitModel<T> {
    pub fn to_container(&self) -> Container {
        Container {
            arch_hash: self.config.arch_hash(),
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Builds a model for `config` and fills every parameter from `c`. The
    /// tensor table must match the architecture exactly.
    pub fn from_container(config: ModelConfig, c: &Container) -> Result<Self> {
        let expected = config.arch_hash();
        if c.arch_hash != expected {
            return Err(Error::ArchitectureMismatch {
                expected,
                found: c.arch_hash,
            });
        }
        let mut model = Self::new(config, 0)?;
        if c.tensors.len() != model.params.len() {
            return Err(Error::TensorTable {
                name: "<table>".into(),
                detail: format!(
                    "expected {} tensors, found {}",
                    model.params.len(),
                    c.tensors.len()
                ),
            });
        }
        for rec in &c.tensors {
            let id = model.params.id(&rec.name).ok_or_else(|| Error::TensorTable {
                name: rec.name.clone(),
                detail: "unknown parameter".into(),
            })?;
            let p = model.params.get_mut(id);
            if p.value.shape() != rec.shape.as_slice() {
                return Err(Error::TensorTable {
                    name: rec.name.clone(),
                    detail: format!("shape {:?}, expected {:?}", rec.shape, p.value.shape()),
                });
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&rec.data) {
                *dst = T::c(src as f64);
            }
        }
        Ok(model)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_container(config, &Container::read(path)?)
    }

    /// Copies every parameter of `src` whose name and shape match and for
    /// which `keep` holds. Returns the number of tensors copied.
    pub fn copy_params_from(&mut self, src: &MultiExitModel<T>, keep: impl Fn(&str) -> bool) -> usize {
        let mut copied = 0;
        for (_, p) in src.params.iter().filter(|(_, p)| keep(&p.name)) {
            if let Some(id) = self.params.id(&p.name) {
                let dst = self.params.get_mut(id);
                if dst.value.shape() == p.value.shape() {
                    dst.value = p.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
