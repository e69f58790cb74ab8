//! Little-endian binary checkpoints.
//!
//! Layout: the magic `MMNK1`; a `u64` byte length and that many bytes of
//! `TrainConfig` JSON; then parameter records until end of file, each
//! `u32` name length, UTF-8 name, `u8` dtype tag (0 = f32, 1 = f64), `u32`
//! rank, `rank × u64` dims and the raw values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::MmNet;
use crate::numerics::{DType, Scalar, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 5] = b"MMNK1";

pub fn encode<T: Scalar>(cfg: &TrainConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(json.len() + params.numel() * std::mem::size_of::<T>() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// A decoded parameter record, converted to the requested scalar type.
pub struct Record<T> {
    pub name: String,
    pub dtype: DType,
    pub value: Tensor<T>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(TrainConfig, Vec<Record<T>>)> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an MMNK1 checkpoint".into()));
    }
    let len = c.u64("config length")? as usize;
    let json = c.take(len, "config")?;
    let cfg: TrainConfig = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
    let mut records = Vec::new();
    while c.at < bytes.len() {
        let n = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(n, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let tag = c.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for {name}")))?;
        let rank = c.u32("rank")? as usize;
        let dims = (0..rank).map(|_| c.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Checkpoint(format!("dims of {name} overflow")))?;
        let bytes_needed = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Checkpoint(format!("size of {name} overflows")))?;
        let raw = c.take(bytes_needed, &name)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        let value = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push(Record { name, dtype, value });
    }
    Ok((cfg, records))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save<T: Scalar>(path: &Path, cfg: &TrainConfig, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode(cfg, params)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds the model described by the embedded config and loads every
/// parameter by name; missing, extra or mis-shaped parameters are errors.
pub fn load<T: Scalar>(path: &Path) -> Result<(TrainConfig, MmNet<T>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (cfg, records) = decode::<T>(&bytes)?;
    cfg.validate().map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = MmNet::<T>::new(&cfg.model, cfg.seed)?;
    if records.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            model.params.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.name.clone()) {
            return Err(Error::Checkpoint(format!("parameter {} appears twice", r.name)));
        }
        model.params.set(&r.name, r.value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok((cfg, model))
}
