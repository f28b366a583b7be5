//! Named-tensor archives on top of the safetensors container.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::TensorError;

/// Named f64 tensors plus string metadata.
#[derive(Clone, Debug, Default)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> TensorArchive {
        TensorArchive::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_all(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.tensors.get(name).ok_or_else(|| TensorError::MissingTensor(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str, TensorError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TensorError::MissingMetadata(key.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data().iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = raw
            .iter()
            .map(|(k, s, b)| Ok((k.clone(), TensorView::new(Dtype::F64, s.clone(), b)?)))
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TensorArchive, TensorError> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(bytes)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(TensorError::Format(format!("tensor {name} has dtype {:?}, expected F64", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(view.shape(), data));
        }
        Ok(TensorArchive { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TensorArchive, TensorError> {
        TensorArchive::from_bytes(&std::fs::read(path)?)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String, TensorError> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
