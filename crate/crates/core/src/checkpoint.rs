//! Single-file parameter container.
//!
//! Layout (little-endian): magic `LVOCKPT1`, 32-byte model hash, `u32` entry
//! count, then per entry a `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims and
//! the values as `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LVOCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_hash: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, model_hash: [u8; 32]) -> Self {
        Self {
            model_hash,
            entries: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.model_hash);
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let model_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.push((name, Tensor::from_vec(&shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Copies every entry into `store`, which must hold exactly the same
    /// names and shapes and come from a model with the same hash.
    pub fn restore(&self, store: &mut ParamStore, model_hash: [u8; 32]) -> Result<()> {
        if self.model_hash != model_hash {
            return Err(Error::Checkpoint("checkpoint was written for a different model configuration".into()));
        }
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            let id = store.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
        }
        for (name, t) in &self.entries {
            let id = store.get(name).expect("checked");
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a/w", Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        s.register("b", Tensor::scalar(-0.0));
        s
    }

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint::from_store(&store(), [7; 32]);
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn restore_checks_layout() {
        let mut src = store();
        *src.value_mut(src.get("b").unwrap()) = Tensor::scalar(4.0);
        let ck = Checkpoint::from_store(&src, [1; 32]);
        let mut dst = store();
        assert!(ck.restore(&mut dst, [2; 32]).is_err());
        ck.restore(&mut dst, [1; 32]).unwrap();
        assert_eq!(dst, src);
        let mut other = ParamStore::new();
        other.register("a/w", Tensor::zeros(&[3, 2]));
        other.register("b", Tensor::scalar(0.0));
        assert!(ck.restore(&mut other, [1; 32]).is_err());
    }

    #[test]
    fn corrupt_files_fail() {
        let bytes = Checkpoint::from_store(&store(), [0; 32]).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
