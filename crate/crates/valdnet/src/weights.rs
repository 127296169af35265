//! Named parameter store and its on-disk format.
//!
//! Weights live in a `BTreeMap` so every iteration — updates, gradient
//! folds, serialization — walks names in the same sorted order, which keeps
//! training bit-reproducible and saved files byte-identical across runs.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "VLDW"
//! version u32      1
//! count   u32      number of tensors
//! entry*  u32 name length, UTF-8 name,
//!         u32 rank, rank x u32 extents,
//!         numel x f32 values (row-major)
//! ```
//!
//! Values are narrowed to f32 on save and widened back on load; a
//! save/load/save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VLDW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    map: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a name; a name may only be bound once.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Contract(format!("duplicate weight name {name:?}")));
        }
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown weight name {name:?}")))
    }

    /// Replace the data of an existing weight, keeping its shape.
    pub fn update(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let t = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown weight name {name:?}")))?;
        if data.len() != t.numel() {
            return Err(Error::Dim(format!(
                "update of {name:?} with {} values, expected {}",
                data.len(),
                t.numel()
            )));
        }
        *t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Serialize to the weight container format, entries in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, tensor) in &self.map {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &e in tensor.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad weight-file magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight-file version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("weight name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()? as f64);
            }
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("weight {name:?}: {e}")))?;
            store.insert(&name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last weight",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated weight file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Tape bindings for a store's weights within one forward pass: each weight
/// becomes a `requires_grad` leaf the first time it is touched, and the
/// name-to-node map is kept so gradients can be folded back by name.
pub struct TapedParams<'a> {
    store: &'a WeightStore,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> TapedParams<'a> {
    pub fn new(store: &'a WeightStore) -> Self {
        TapedParams { store, bound: BTreeMap::new() }
    }

    /// Start with names already bound to existing tape leaves (used by the
    /// gradient checker, which owns the leaves it perturbs).
    pub fn preset(
        store: &'a WeightStore,
        bound: impl IntoIterator<Item = (String, NodeId)>,
    ) -> Self {
        TapedParams { store, bound: bound.into_iter().collect() }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = tape.leaf(self.store.get(name)?.clone().with_grad());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Names bound during this pass with their node ids, in name order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("b.bias", Tensor::vector(&[0.25, -1.5]).unwrap()).unwrap();
        s.insert(
            "a.kernel",
            Tensor::new(vec![2, 1, 1, 1], vec![1.0, -0.5]).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("w1.vldw");
        let p2 = dir.path().join("w2.vldw");
        let store = sample_store();
        store.save(&p1).unwrap();
        let loaded = WeightStore::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_preserves_f32_representable_values_exactly() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.vldw");
        let store = sample_store();
        store.save(&p).unwrap();
        let loaded = WeightStore::load(&p).unwrap();
        assert_eq!(loaded.get("b.bias").unwrap().data(), &[0.25, -1.5]);
        assert_eq!(loaded.get("a.kernel").unwrap().shape(), &[2, 1, 1, 1]);
        assert_eq!(loaded.get("a.kernel").unwrap().data(), &[1.0, -0.5]);
    }

    #[test]
    fn hand_constructed_single_entry_file_parses_exactly() {
        // One tensor: name "w", shape [1], value 0.5.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VLDW");
        bytes.extend_from_slice(&1u32.to_le_bytes()); // version
        bytes.extend_from_slice(&1u32.to_le_bytes()); // count
        bytes.extend_from_slice(&1u32.to_le_bytes()); // name length
        bytes.push(b'w');
        bytes.extend_from_slice(&1u32.to_le_bytes()); // rank
        bytes.extend_from_slice(&1u32.to_le_bytes()); // extent
        bytes.extend_from_slice(&0.5f32.to_le_bytes());

        let dir = tempdir().unwrap();
        let p = dir.path().join("hand.vldw");
        std::fs::write(&p, &bytes).unwrap();
        let store = WeightStore::load(&p).unwrap();
        assert_eq!(store.len(), 1);
        let w = store.get("w").unwrap();
        assert_eq!(w.shape(), &[1]);
        assert_eq!(w.data(), &[0.5]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.vldw");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(WeightStore::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.vldw");
        let full = dir.path().join("full.vldw");
        sample_store().save(&full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(WeightStore::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("extra.vldw");
        sample_store().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(WeightStore::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut s = WeightStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("x", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn entries_serialize_in_sorted_name_order() {
        let dir = tempdir().unwrap();
        let store = sample_store(); // inserted b.* before a.*
        let p = dir.path().join("sorted.vldw");
        store.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let a_pos = bytes.windows(8).position(|w| w == b"a.kernel").unwrap();
        let b_pos = bytes.windows(6).position(|w| w == b"b.bias").unwrap();
        assert!(a_pos < b_pos, "entries must be written in sorted name order");
    }

    #[test]
    fn taped_params_bind_once_and_report_gradients() {
        let store = sample_store();
        let mut tape = Tape::new();
        let mut params = TapedParams::new(&store);
        let first = params.get(&mut tape, "b.bias").unwrap();
        let again = params.get(&mut tape, "b.bias").unwrap();
        assert_eq!(first, again, "rebinding must reuse the same leaf");

        let sq = tape.mul(first, first).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(first).unwrap(), &[0.5, -3.0]);
        let bound: Vec<&str> = params.bound().map(|(n, _)| n).collect();
        assert_eq!(bound, ["b.bias"]);
    }
}
