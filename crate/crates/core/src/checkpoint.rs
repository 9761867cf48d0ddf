//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DRINETCK"
//! version    u32      1
//! meta_len   u32      length of the TOML metadata that follows
//! meta       UTF-8    CheckpointMeta as TOML
//! count      u32      number of entries
//! entry*     name_len u16, name (UTF-8), flags u8 (bit 0: trainable),
//!            ndim u8, dims u64 × ndim, values f64 × Π dims (row-major)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::params::ParameterStore;

pub const MAGIC: &[u8; 8] = b"DRINETCK";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub voxel_size: f64,
    #[serde(default)]
    pub step: u64,
    pub network: NetworkConfig,
}

pub fn encode(meta: &CheckpointMeta, store: &ParameterStore) -> Result<Vec<u8>> {
    let meta_text = toml::to_string(meta).map_err(|e| Error::config(format!("checkpoint meta: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta_text.len()).map_err(|_| Error::config("meta too large"))?.to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&u32::try_from(store.len()).map_err(|_| Error::config("too many entries"))?.to_le_bytes());
    for (name, p) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("parameter name too long: {name}")))?;
        if p.shape.len() > MAX_NDIM {
            return Err(Error::shape(format!("{name}: {} dims exceed {MAX_NDIM}", p.shape.len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(format!("checkpoint truncated in {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ParameterStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len, "meta")?).map_err(|_| Error::format("meta is not UTF-8"))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_text).map_err(|e| Error::format(format!("checkpoint meta: {e}")))?;

    let count = r.u32("entry count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::format("name is not UTF-8"))?;
        let flags = r.u8("flags")?;
        if flags & !1 != 0 {
            return Err(Error::format(format!("{name}: unknown flags {flags:#x}")));
        }
        let ndim = r.u8("ndim")? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::format(format!("{name}: {ndim} dims exceed {MAX_NDIM}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut n: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64("dims")?).map_err(|_| Error::format("dimension overflow"))?;
            n = n.checked_mul(d).ok_or_else(|| Error::format(format!("{name}: element count overflows")))?;
            shape.push(d);
        }
        // reject before allocating
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::format(format!("{name}: {n} values exceed remaining bytes")));
        }
        let values = r
            .take(n * 8, "values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, shape, values, flags & 1 == 1).map_err(|e| Error::format(e.to_string()))?;
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    Ok((meta, store))
}

pub fn save(path: impl AsRef<Path>, meta: &CheckpointMeta, store: &ParameterStore) -> Result<()> {
    fs::write(path, encode(meta, store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointMeta, ParameterStore)> {
    decode(&fs::read(path)?)
}

/// Checks that `store` holds exactly the parameters `meta.network` needs.
pub fn check_compatible(meta: &CheckpointMeta, store: &ParameterStore) -> Result<()> {
    let expected = crate::network::init_params(&meta.network, 0)?;
    for (name, p) in expected.iter() {
        let got = store.get(name).map_err(|_| Error::format(format!("checkpoint lacks {name}")))?;
        if got.shape != p.shape {
            return Err(Error::format(format!("{name}: shape {:?}, expected {:?}", got.shape, p.shape)));
        }
    }
    if store.len() != expected.len() {
        return Err(Error::format(format!("checkpoint has {} entries, expected {}", store.len(), expected.len())));
    }
    Ok(())
}
