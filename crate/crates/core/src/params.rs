//! Named parameter tensors and the flat float32 archive they persist to.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic   b"MNTA"
//! version u32 = 1
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f32 × Π dims }
//! ```
//!
//! Entries are written in name order, so equal stores produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MNTA";
const VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Rc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_rc(&self, name: &str) -> Option<Rc<Tensor>> {
        self.tensors.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Rc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name).map(Rc::unwrap_or_clone)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), Rc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn absorb_prefix(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in other.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.tensors.insert(name.clone(), t.clone());
            n += 1;
        }
        n
    }

    /// The tensors whose names satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Human-readable differences in names and shapes against `expected`.
    pub fn shape_diff(&self, expected: &ParamStore) -> Vec<String> {
        let mut diff = Vec::new();
        for (name, t) in &expected.tensors {
            match self.tensors.get(name) {
                None => diff.push(format!("missing `{name}` {:?}", t.shape())),
                Some(have) if have.shape() != t.shape() => {
                    diff.push(format!("`{name}`: have {:?}, expected {:?}", have.shape(), t.shape()))
                }
                _ => {}
            }
        }
        for name in self.tensors.keys().filter(|n| !expected.tensors.contains_key(*n)) {
            diff.push(format!("unexpected `{name}`"));
        }
        diff
    }

    /// Rounds every tensor to float32 precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.iter_mut() {
            t.round_to_f32();
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(format!("unsupported archive version {version}"));
        }
        let count = read_u32(&mut cur)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut cur)? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(|e| e.to_string())?;
            let name = String::from_utf8(name).map_err(|e| e.to_string())?;
            let ndim = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b).map_err(|e| e.to_string())?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            cur.read_exact(&mut raw)
                .map_err(|_| format!("truncated data for `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(name, Tensor::new(&shape, data));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_bytes(&bytes).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| "truncated archive".to_string())?;
    Ok(u32::from_le_bytes(b))
}

/// He-normal initialization for a weight with `fan_in` inputs.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot-uniform initialization.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn archive_round_trip_is_byte_exact(
            values in prop::collection::vec(-1e6f32..1e6, 1..40),
            split in 1usize..4,
        ) {
            let mut store = ParamStore::new();
            let n = values.len();
            let first = n / split.max(1);
            store.insert("b.weight", Tensor::new(&[n], values.iter().map(|&v| v as f64).collect()));
            store.insert("a.bias", Tensor::new(&[1, first.max(1)], vec![0.25; first.max(1)]));
            let bytes = store.to_bytes();
            let back = ParamStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &store);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3, 3]));
        let bytes = store.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(ParamStore::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn shape_diff_names_every_mismatch() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros(&[2]));
        a.insert("extra", Tensor::zeros(&[1]));
        let mut b = ParamStore::new();
        b.insert("x", Tensor::zeros(&[3]));
        b.insert("y", Tensor::zeros(&[1]));
        let diff = a.shape_diff(&b);
        assert_eq!(diff.len(), 3, "{diff:?}");
    }
}
