//! Named-array checkpoint archive.
//!
//! Layout: 8-byte magic `STYLERES`, u64 little-endian manifest length, the
//! JSON manifest, then the f32 little-endian data section. Manifest offsets
//! are relative to the start of the data section. Tensors are stored in name
//! order, so identical contents always serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn, Kind, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STYLERES";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<i64>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<i64>,
    pub data: Vec<f32>,
}

/// All parameters and buffers of a run plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointBundle {
    tensors: BTreeMap<String, StoredTensor>,
    pub metadata: serde_json::Value,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl CheckpointBundle {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let t = t.detach().to_kind(Kind::Float).contiguous();
        let data = Vec::<f32>::try_from(&t.view([-1]))?;
        self.tensors.insert(
            name.to_string(),
            StoredTensor {
                shape: t.size(),
                data,
            },
        );
        Ok(())
    }

    pub fn get_tensor(&self, name: &str) -> Result<Tensor> {
        let st = self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(Tensor::from_slice(&st.data).view(st.shape.as_slice()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    /// Stores every variable of `vs` under `prefix`.
    pub fn insert_var_store(&mut self, prefix: &str, vs: &nn::VarStore) -> Result<()> {
        for (name, t) in vs.variables() {
            self.insert_tensor(&format!("{prefix}{name}"), &t)?;
        }
        Ok(())
    }

    /// Copies `prefix`-named tensors into the variables of `vs`. Every
    /// variable must be present with a matching shape; nothing is written
    /// unless all of them are.
    pub fn load_var_store(&self, prefix: &str, vs: &mut nn::VarStore) -> Result<()> {
        let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        let mut staged = Vec::with_capacity(vars.len());
        for (name, var) in &vars {
            let key = format!("{prefix}{name}");
            let src = self.get_tensor(&key)?;
            if src.size() != var.size() {
                return Err(Error::Shape(format!("{key}: stored {:?}, model {:?}", src.size(), var.size())));
            }
            staged.push(src);
        }
        tch::no_grad(|| {
            for ((_, mut var), src) in vars.into_iter().zip(staged) {
                var.copy_(&src.to_kind(var.kind()));
            }
        });
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, st)| {
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: st.shape.clone(),
                    byte_offset: offset,
                };
                offset += 4 * st.data.len() as u64;
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let data_len: usize = self.tensors.values().map(|t| 4 * t.data.len()).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for st in self.tensors.values() {
            for v in &st.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(integrity("bad magic or truncated header"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[16..];
        if mlen > rest.len() {
            return Err(integrity("manifest length exceeds file size"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[..mlen]).map_err(|e| integrity(format!("corrupt manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(integrity(format!("unsupported format version {}", manifest.format_version)));
        }
        let data = &rest[mlen..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.shape.iter().any(|&d| d < 0) {
                return Err(integrity(format!("{}: negative dimension", e.name)));
            }
            let n: u64 = e.shape.iter().map(|&d| d as u64).product();
            if e.byte_offset != expected_offset {
                return Err(integrity(format!("{}: unexpected offset {}", e.name, e.byte_offset)));
            }
            let end = expected_offset + 4 * n;
            if end > data.len() as u64 {
                return Err(integrity(format!("{}: data section truncated", e.name)));
            }
            let values = data[expected_offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors
                .insert(
                    e.name.clone(),
                    StoredTensor {
                        shape: e.shape.clone(),
                        data: values,
                    },
                )
                .is_some()
            {
                return Err(integrity(format!("duplicate tensor {}", e.name)));
            }
            expected_offset = end;
        }
        if expected_offset != data.len() as u64 {
            return Err(integrity("trailing bytes after data section"));
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }

    /// Writes through a temporary file and renames, so a failed save never
    /// leaves a partial checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized manifest, hex encoded.
    pub fn manifest_hash(&self) -> Result<String> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        Ok(hex::encode(Sha256::digest(&manifest)))
    }
}

/// SHA-256 of any serializable value's JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    fn sample() -> CheckpointBundle {
        let mut b = CheckpointBundle::new(serde_json::json!({"stage": "gan", "iteration": 3}));
        b.insert_tensor("g.b", &Tensor::from_slice(&[1.5f32, -2.0, 3.25]).view([3, 1])).unwrap();
        b.insert_tensor("g.a", &Tensor::randn([2, 2], (Kind::Float, Device::Cpu))).unwrap();
        b.insert_tensor("d.x", &Tensor::from(f32::MIN_POSITIVE)).unwrap();
        b
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        let back = CheckpointBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.manifest_hash().unwrap(), b.manifest_hash().unwrap());
        assert_eq!(back.get_tensor("d.x").unwrap().size(), Vec::<i64>::new());
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                CheckpointBundle::from_bytes(&bytes[..cut]),
                Err(Error::Integrity(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[20] = b'!';
        assert!(matches!(CheckpointBundle::from_bytes(&bad), Err(Error::Integrity(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(CheckpointBundle::from_bytes(&extra), Err(Error::Integrity(_))));
    }

    #[test]
    fn var_store_prefix_load_is_all_or_nothing() {
        let vs = nn::VarStore::new(Device::Cpu);
        let _w = vs.root().randn_standard("w", &[2, 3]);
        let _b = vs.root().zeros("bias", &[3]);
        let mut bundle = CheckpointBundle::default();
        bundle.insert_var_store("net.", &vs).unwrap();
        bundle.insert_tensor("other.x", &Tensor::from(1f32)).unwrap();

        let mut target = nn::VarStore::new(Device::Cpu);
        let w2 = target.root().zeros("w", &[2, 3]);
        let _b2 = target.root().zeros("bias", &[3]);
        bundle.load_var_store("net.", &mut target).unwrap();
        assert!(w2.equal(&vs.variables()["w"]));

        let mut partial = CheckpointBundle::default();
        partial.insert_tensor("net.w", &Tensor::ones([2, 3], (Kind::Float, Device::Cpu))).unwrap();
        let before = w2.copy();
        assert!(matches!(partial.load_var_store("net.", &mut target), Err(Error::MissingTensor(_))));
        assert!(w2.equal(&before));
    }

    #[test]
    fn missing_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.ckpt");
        assert!(matches!(CheckpointBundle::load(&p), Err(Error::MissingCheckpoint(_))));
        let s = sample();
        s.save(&p).unwrap();
        assert_eq!(CheckpointBundle::load(&p).unwrap(), s);
        assert!(!p.with_extension("partial").exists());
    }
}
