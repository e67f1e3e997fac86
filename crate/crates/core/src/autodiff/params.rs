//! Named parameter tensors and their on-disk archive.
//!
//! The archive is a VXL1 `f32` array of dims `(1, 1, N)` holding every
//! parameter back to back, followed by the trailer `b"MNFT"`, a `u32` LE
//! byte length and a JSON manifest of `{name, shape, offset}` records.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::vxl::{Payload, VxlArray};

const TRAILER: &[u8; 4] = b"MNFT";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Leaf handles of a store inside one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Adds every parameter to `g` as a frozen constant.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Gradients of a bound store after `backward`, zeros where none flowed.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Vec<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_archive(&self, meta: serde_json::Value) -> Vec<u8> {
        let mut flat = Vec::with_capacity(self.count());
        let mut params = Vec::with_capacity(self.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            params.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: flat.len(),
            });
            flat.extend(t.data().iter().map(|v| v.to64() as f32));
        }
        let n = flat.len();
        let array = VxlArray::new(vec![1, 1, n.max(1)], [1.0; 3], Payload::F32(if n == 0 { vec![0.0] } else { flat }))
            .expect("flat parameter array is well-formed");
        let mut bytes = array.encode();
        let manifest = serde_json::to_vec(&Manifest { params, meta }).expect("manifest serializes");
        bytes.extend_from_slice(TRAILER);
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&manifest);
        bytes
    }

    /// Parses an archive, returning the store and the manifest's `meta`.
    pub fn from_archive(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (array, used) = VxlArray::decode_prefix(bytes)?;
        let rest = &bytes[used..];
        if rest.len() < 8 || &rest[..4] != TRAILER {
            return Err(Error::CorruptFile("missing parameter manifest".into()));
        }
        let len = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
        if rest.len() != 8 + len {
            return Err(Error::CorruptFile("manifest length mismatch".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[8..])
            .map_err(|e| Error::CorruptFile(format!("manifest: {e}")))?;
        let Payload::F32(flat) = array.payload else {
            return Err(Error::CorruptFile("parameter payload is not f32".into()));
        };
        let mut store = Self::new();
        for e in manifest.params {
            let n: usize = e.shape.iter().product();
            let slice = flat
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::CorruptFile(format!("parameter {} out of range", e.name)))?;
            let t = Tensor::new(e.shape, slice.iter().map(|&v| T::of(f64::from(v))).collect())?;
            store.insert(e.name, t)?;
        }
        Ok((store, manifest.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_archive(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_archive(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 1.0)).unwrap();
        s.insert("a.b", Tensor::from_fn(&[3], |i| -(i as f32))).unwrap();
        let bytes = s.to_archive(serde_json::json!({"seed": 7}));
        let (back, meta) = ParamStore::<f32>::from_archive(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta["seed"], 7);
        assert!(s.insert("a.b", Tensor::zeros(&[1])).is_err());
        assert!(ParamStore::<f32>::from_archive(&bytes[..bytes.len() - 1]).is_err());
    }
}
