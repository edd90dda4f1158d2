//! Self-describing model container.
//!
//! Stored as a safetensors file: named little-endian f32 tensors with shapes,
//! plus a string metadata map. The map always carries `format` and `kind`;
//! models add their architecture and an echo of the config that produced them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

pub const FORMAT: &str = "fsbbt-checkpoint/1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set_meta("format", FORMAT);
        c.set_meta("kind", kind);
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::consistency(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn insert(&mut self, name: String, shape: Vec<usize>, values: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.insert(name, (shape, values));
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, v)| (s.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::consistency(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, (shape, values))| {
                (name.clone(), shape.clone(), values.iter().flat_map(|v| v.to_le_bytes()).collect())
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::consistency(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::consistency(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format { path: origin.to_path_buf(), msg };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| fmt(e.to_string()))?;
        let metadata: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        if metadata.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(fmt(format!("not a {FORMAT} container")));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| fmt(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F32 {
                return Err(fmt(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name.to_string(), (view.shape().to_vec(), values));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Checkpoint::new("test");
        c.set_meta("config", "{\"a\":1}");
        c.insert("w".into(), vec![2, 3], vec![0.5, -1.0, 2.25, 3.0, f32::MIN_POSITIVE, 7.0]);
        c.insert("b".into(), vec![3], vec![1.0, 2.0, 3.0]);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.kind(), Some("test"));
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::from_bytes(b"garbage", Path::new("mem")).is_err());
    }
}
