//! Parameter checkpoints: `manifest.json` plus one raw little-endian `f64`
//! blob per named tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use segda_grad::{ParamGroup, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::ArchConfig;
use crate::error::{CoreError, Result};

const FORMAT: &str = "segda-checkpoint-v1";
const BUFFER_GROUP: &str = "buffer";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    architecture: ArchConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    /// Parameter group, or `"buffer"` for non-trainable state.
    group: String,
    shape: Vec<usize>,
    file: String,
}

/// Everything needed to rebuild a set of modules.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: ArchConfig,
    pub params: ParamStore,
    /// Non-trainable state such as batch-norm running statistics.
    pub buffers: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut tensors = Vec::new();
        let params = self.params.iter().map(|(n, p)| (n, p.group.as_str(), &p.value));
        let buffers = self.buffers.iter().map(|(n, t)| (n.as_str(), BUFFER_GROUP, t));
        for (name, group, value) in params.chain(buffers) {
            let file = format!("{name}.bin");
            let bytes: Vec<u8> = value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| CoreError::io(path, e))?;
            tensors.push(TensorEntry { name: name.to_string(), group: group.to_string(), shape: value.shape().to_vec(), file });
        }
        let manifest = Manifest { format: FORMAT.into(), architecture: self.architecture.clone(), tensors };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Json { path: path.clone(), source: e })?;
        fs::write(&path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::Json { path: path.clone(), source: e })?;
        if manifest.format != FORMAT {
            return Err(CoreError::Parse { file: path, offset: 0, msg: format!("unknown format `{}`", manifest.format) });
        }
        let mut params = ParamStore::new();
        let mut buffers = BTreeMap::new();
        for entry in manifest.tensors {
            let file = dir.join(&entry.file);
            let bytes = fs::read(&file).map_err(|e| CoreError::io(&file, e))?;
            let numel: usize = entry.shape.iter().product();
            if bytes.len() != numel * 8 {
                return Err(CoreError::Parse {
                    file,
                    offset: bytes.len().min(numel * 8),
                    msg: format!("expected {} bytes for shape {:?}, found {}", numel * 8, entry.shape, bytes.len()),
                });
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            let tensor = Tensor::new(entry.shape, data)?;
            if entry.group == BUFFER_GROUP {
                buffers.insert(entry.name, tensor);
            } else {
                let group = ParamGroup::parse(&entry.group).ok_or_else(|| CoreError::Parse {
                    file: path.clone(),
                    offset: 0,
                    msg: format!("unknown parameter group `{}`", entry.group),
                })?;
                params.insert(&entry.name, group, tensor);
            }
        }
        Ok(Self { architecture: manifest.architecture, params, buffers })
    }
}
