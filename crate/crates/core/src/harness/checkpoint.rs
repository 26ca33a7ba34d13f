//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TPSN"                      magic
//! u32                         format version
//! u32                         tensor count
//! per tensor, in name order:
//!   u32 + bytes               UTF-8 name
//!   u32                       rank
//!   u64 * rank                dimensions
//!   f32 * numel               values
//! [u8; 32]                    SHA-256 of the model configuration
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::models::{ModelConfig, ParamStore};
use crate::substrate::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPSN";
pub const VERSION: u32 = 1;
pub const DIGEST_LEN: usize = 32;

/// Digest binding a checkpoint to the architecture that produced it.
pub fn config_digest(cfg: &ModelConfig) -> [u8; DIGEST_LEN] {
    Sha256::digest(cfg.canonical().as_bytes()).into()
}

pub fn encode(store: &ParamStore, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * store.num_scalars(""));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(store.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u32::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&config_digest(cfg));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Parse a checkpoint written for `cfg`. Fails with [`Error::ConfigDrift`]
/// when the stored digest belongs to a different configuration.
pub fn decode(bytes: &[u8], cfg: &ModelConfig) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(
                usize::try_from(r.u64()?)
                    .map_err(|_| Error::Checkpoint(format!("{name}: dimension overflow")))?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect();
        if store.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    let digest: [u8; DIGEST_LEN] = r.array()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    if digest != config_digest(cfg) {
        return Err(Error::ConfigDrift);
    }
    store.check_layout(cfg)?;
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let bytes = encode(store, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, cfg: &ModelConfig) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, cfg)
}
