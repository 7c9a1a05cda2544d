//! Binary model checkpoints.
//!
//! ```text
//! b"MGCMAMDL" | u32 version = 1
//! u64 config length | PipelineConfig as UTF-8 JSON
//! repeated until EOF, in store order:
//!   u32 name length | name (UTF-8) | u32 rank | rank * u64 extents | f64 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{MgcmaModel, PipelineConfig};
use crate::scalar::Scalar;
use crate::tensor::{ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGCMAMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &MgcmaModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, name, tensor) in model.store().iter() {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for e in tensor.shape() {
            out.extend_from_slice(&(*e as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
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
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("checkpoint truncated in {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Corruption(format!("{what} {v} too large")))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<MgcmaModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = to_usize(r.u64("config length")?, "config length")?;
    let config: PipelineConfig = serde_json::from_slice(r.take(json_len, "config")?)?;
    config.validate()?;
    let mut store = ParameterStore::new(0);
    while !r.done() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Corruption("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").and_then(|e| to_usize(e, "extent")))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, e| acc.checked_mul(*e))
            .ok_or_else(|| Error::Corruption("parameter extents overflow".into()))?;
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| Error::Corruption("parameter too large".into()))?,
            "parameter data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    MgcmaModel::from_store(config, store)
}

pub fn save_checkpoint<T: Scalar>(model: &MgcmaModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<MgcmaModel<T>> {
    decode_checkpoint(&fs::read(path)?)
}
