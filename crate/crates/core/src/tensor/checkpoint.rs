//! Binary checkpoints, little-endian throughout.
//!
//! ```text
//! magic "MLRMCKPT" | version u32 | dtype u8 | param count u32
//! meta_len u32 | meta (UTF-8)
//! per param:  name_len u32 | name | ndim u32 | dims u64.. | raw values
//! has_state u8 | [step u64 | per param: m values | v values]
//! ```
//!
//! Values are stored in the writer's dtype; loading converts to the reader's.

use std::path::Path;

use super::{numel, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MLRMCKPT";
const VERSION: u32 = 1;

/// Adam moments and step counter, aligned with the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form metadata, typically the model config as TOML.
    pub meta: String,
    pub params: ParamStore<T>,
    pub state: Option<OptimState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        put_bytes(&mut out, self.meta.as_bytes());
        for p in self.params.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, p.value.data());
        }
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                for (m, v) in s.m.iter().zip(&s.v) {
                    put_values(&mut out, m.data());
                    put_values(&mut out, v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let dtype = r.take(1)?[0];
        let width = match dtype {
            d if d == f32::DTYPE => 4,
            d if d == f64::DTYPE => 8,
            d => return Err(Error::Parse(format!("unknown dtype tag {d}"))),
        };
        let count = r.u32()? as usize;
        let meta = String::from_utf8(r.bytes_field()?.to_vec()).map_err(|e| Error::Parse(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes_field()?.to_vec()).map_err(|e| Error::Parse(e.to_string()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.values::<T>(numel(&shape), width)?;
            params.add(name, Tensor::from_vec(&shape, data)?);
            shapes.push(shape);
        }
        let state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
                for s in &shapes {
                    m.push(Tensor::from_vec(s, r.values::<T>(numel(s), width)?)?);
                    v.push(Tensor::from_vec(s, r.values::<T>(numel(s), width)?)?);
                }
                Some(OptimState { step, m, v })
            }
            t => return Err(Error::Parse(format!("bad optimizer-state flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { meta, params, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        // Write-then-rename so a crash never leaves a truncated checkpoint behind.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound {
                what: "checkpoint",
                path: path.to_path_buf(),
            });
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, vals: &[T]) {
    out.reserve(vals.len() * T::BYTES);
    for &v in vals {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn values<T: Scalar>(&mut self, n: usize, width: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Parse("oversized tensor".into()))?)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| if width == 4 { T::c(f32::read_le(c) as f64) } else { T::c(f64::read_le(c)) })
            .collect())
    }
}
