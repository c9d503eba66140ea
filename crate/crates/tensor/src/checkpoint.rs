use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::{Scalar, Tensor};

const FORMAT: &str = "kfgen-arrays";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

/// JSON side of a checkpoint; the `.bin` side holds the raw little-endian
/// arrays back to back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<CheckpointEntry>,
}

/// Ordered named arrays plus string metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    arrays: Vec<(String, Tensor<T>)>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.bin")), PathBuf::from(format!("{s}.json")))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self {
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    /// Snapshot of every parameter in store order.
    pub fn from_store(store: &ParamStore<T>) -> Self {
        let mut ck = Self::new();
        for (_, p) in store.iter() {
            ck.insert(p.name.clone(), p.value.clone());
        }
        ck
    }

    /// Inserts or replaces an array.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.arrays.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn arrays(&self) -> &[(String, Tensor<T>)] {
        &self.arrays
    }

    /// Copies every store parameter from the checkpoint. Arrays whose name
    /// starts with `skip_prefix` are ignored when checking for extras.
    pub fn load_into(&self, store: &mut ParamStore<T>, skip_prefix: &str) -> Result<()> {
        let mut problems = Vec::new();
        for (_, p) in store.iter() {
            match self.get(&p.name) {
                None => problems.push(format!("missing {}", p.name)),
                Some(t) if t.shape() != p.value.shape() => problems.push(format!(
                    "shape {}: checkpoint {:?} vs model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )),
                Some(_) => {}
            }
        }
        for (name, _) in &self.arrays {
            if !name.starts_with(skip_prefix) && store.id(name).is_none() {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint does not match model: {}",
                problems.join(", ")
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            *store.value_mut(id) = self.get(&name).expect("checked").clone();
        }
        Ok(())
    }

    /// Writes `{base}.bin` and `{base}.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let (bin, json) = paths(base);
        if let Some(dir) = bin.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            let offset = bytes.len();
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            entries.push(CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset,
                nbytes: bytes.len() - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        fs::write(&bin, bytes)?;
        fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a checkpoint written at any supported precision, converting to `T`.
    pub fn load(base: &Path) -> Result<Self> {
        let (bin, json) = paths(base);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
        if manifest.format != FORMAT {
            return Err(TensorError::Checkpoint(format!("unknown format {}", manifest.format)));
        }
        let bytes = fs::read(&bin)?;
        let mut ck = Self::new();
        ck.meta = manifest.meta;
        for e in manifest.arrays {
            let end = e.offset + e.nbytes;
            if end > bytes.len() {
                return Err(TensorError::Checkpoint(format!("array {} runs past end of data", e.name)));
            }
            let raw = &bytes[e.offset..end];
            let data: Vec<T> = match e.dtype.as_str() {
                "f32" => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                "f64" => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
                other => return Err(TensorError::Checkpoint(format!("unsupported dtype {other}"))),
            };
            let t = Tensor::new(&e.shape, data)
                .map_err(|_| TensorError::Checkpoint(format!("array {} has the wrong size", e.name)))?;
            ck.arrays.push((e.name, t));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_cross_precision() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("sub/ck");
        let mut ck = Checkpoint::<f64>::new();
        ck.insert("a", Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap());
        ck.insert("b", Tensor::scalar(7.0));
        ck.meta.insert("stage".into(), "s1".into());
        ck.save(&base).unwrap();

        let back = Checkpoint::<f64>::load(&base).unwrap();
        assert_eq!(back.get("a"), ck.get("a"));
        assert_eq!(back.meta["stage"], "s1");
        let narrow = Checkpoint::<f32>::load(&base).unwrap();
        assert_eq!(narrow.get("a").unwrap().data(), &[1.0f32, -2.5, 3.25, 0.0]);

        let text = std::fs::read_to_string(dir.path().join("sub/ck.json")).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.arrays[1].offset, 32);
        assert_eq!(m.arrays[1].nbytes, 8);
    }

    #[test]
    fn mismatch_lists_keys() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(&[2]));
        store.add("v", Tensor::zeros(&[1]));
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::zeros(&[3]));
        ck.insert("z", Tensor::zeros(&[1]));
        let err = ck.load_into(&mut store, "__").unwrap_err().to_string();
        assert!(err.contains("missing v"), "{err}");
        assert!(err.contains("shape w"), "{err}");
        assert!(err.contains("unexpected z"), "{err}");
    }
}
