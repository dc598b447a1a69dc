//! Named-tensor binary store.
//!
//! Layout (all integers little-endian u32):
//! `count`, then per entry: `name_len`, UTF-8 name bytes, `rank`, one extent
//! per dimension, then the f32 payload in row-major order. Floats are moved
//! as raw bits, so save/load round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::Tensor;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("weight store i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed weight store at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },

    #[error("weight store is missing entry '{0}'")]
    Missing(String),
}

/// Ordered map of tensor name to value. Iteration order is the sorted name
/// order, which keeps serialization and parameter binding deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    map: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, StoreError> {
        self.get(name).ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, t) in &self.map {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let count = r.u32("entry count")? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| r.err_at(r.pos - name_len, "name is not valid UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.err_at(r.pos - 4, format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, "f32 payload")?;
            let data: Vec<f32> =
                payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| r.err_at(r.pos, format!("inconsistent entry '{name}': {e}")))?;
            map.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(WeightStore { map })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err_at(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn err_at(&self, offset: usize, msg: impl Into<String>) -> StoreError {
        StoreError::Malformed { offset, msg: msg.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("bmp.embed.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.5]).unwrap());
        s.insert("irm.step.b", Tensor::new(&[4], vec![0.125, -0.25, 0.5, -1.0]).unwrap());
        s.insert("scalar", Tensor::scalar(42.0));
        s
    }

    #[test]
    fn round_trips_bit_exactly() {
        let store = sample_store();
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(store, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn rejects_truncated_input() {
        let bytes = sample_store().to_bytes();
        let err = WeightStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, StoreError::Malformed { .. }), "{err}");
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut bytes = sample_store().to_bytes();
        bytes.push(0);
        assert!(WeightStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_non_utf8_names() {
        // count=1, name_len=2, invalid UTF-8 name
        let mut bytes = 1u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0xff, 0xfe]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(WeightStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("mtm-store-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.bin");
        let store = sample_store();
        store.save(&path).unwrap();
        let back = WeightStore::load(&path).unwrap();
        assert_eq!(store, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
