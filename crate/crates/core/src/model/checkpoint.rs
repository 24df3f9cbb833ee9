//! `AIAC` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AIAC"            magic
//! u32                format version (1)
//! u32 + bytes        UTF-8 TOML model config
//! u64                optimizer step counter
//! u32                tensor count
//! per tensor, in parameter_layout order:
//!   u32 + bytes      UTF-8 name
//!   u32              rank
//!   u32 * rank       extents
//!   f64 * numel      values, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::transformer::parameter_layout;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AIAC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model config, named weights and optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let doc = toml::to_string(&self.config).expect("model config serializes");
        write_bytes(&mut out, doc.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            write_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not an AIAC checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let doc = String::from_utf8(read_len_prefixed(&mut r)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config: ModelConfig =
            toml::from_str(&doc).map_err(|e| Error::Checkpoint(format!("bad config document: {e}")))?;
        config.validate()?;
        let step = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let layout = parameter_layout(&config);
        if count != layout.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", layout.len())));
        }
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_shape) in layout {
            let name = String::from_utf8(read_len_prefixed(&mut r)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != want_name {
                return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
            }
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            if shape != want_shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {shape:?}, expected {want_shape:?}")));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config, names, tensors, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_len_prefixed(r: &mut &[u8]) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
