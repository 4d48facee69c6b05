//! `MCUN` checkpoint format, all integers little-endian:
//!
//! ```text
//! "MCUN" | version: u32 | config_len: u32 | config JSON (canonical, UTF-8)
//! count: u32 | count × { name_len: u32 | name | rank: u32 | dims: u32 × rank | f32 × prod(dims) }
//! ```
//!
//! Entries are written in lexicographic name order. Batch-norm running
//! statistics are stored alongside the trainable tensors.

use std::fs;
use std::path::Path;

use crate::arch::{Model, NetworkConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MCUN";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_model<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = model.config().to_canonical_json();
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, model.params().len())?;
    for (name, tensor) in model.params().iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 4)?;
        for d in tensor.dims() {
            put_u32(&mut out, d)?;
        }
        for v in tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic bytes; not an MCUN checkpoint".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let config_len = r.u32("config length")?;
    let config = NetworkConfig::from_json(r.utf8(config_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = r.utf8(name_len, "tensor name")?.to_string();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has unsupported rank {rank}"
            )));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = r.u32("dims")?;
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has invalid dims {dims:?}")))?;
        let payload = r.take(len.saturating_mul(4), &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))))
            .collect();
        let tensor = Tensor::from_vec(Shape::from(dims), data)?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Model::from_parts(config, params)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_model(&bytes)
}
