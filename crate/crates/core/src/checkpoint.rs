//! Self-describing model checkpoints.
//!
//! The file is a safetensors container: every weight and running statistic is
//! stored as a named little-endian `f32` tensor, and the header metadata carries
//! the format version, the [`CascadeSpec`] as TOML, the init seed, and any
//! caller-supplied string entries (e.g. training resolution).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::model::{CascadeSpec, StackUNet};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

const KEY_VERSION: &str = "format_version";
const KEY_SPEC: &str = "cascade_spec";
const KEY_SEED: &str = "seed";
const KEY_TRAINABLE: &str = "non_trainable";

/// Extra metadata key holding the training resolution as `HxW`.
pub const KEY_RESOLUTION: &str = "resolution";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StackUNet,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Training resolution recorded under [`KEY_RESOLUTION`].
    pub fn resolution(&self) -> Option<(usize, usize)> {
        let s = self.metadata.get(KEY_RESOLUTION)?;
        let (h, w) = s.split_once('x')?;
        Some((h.parse().ok()?, w.parse().ok()?))
    }
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

pub fn save(path: &Path, model: &StackUNet, extra: &BTreeMap<String, String>) -> Result<()> {
    let mut info: HashMap<String, String> = HashMap::new();
    for (k, v) in extra {
        if [KEY_VERSION, KEY_SPEC, KEY_SEED, KEY_TRAINABLE].contains(&k.as_str()) {
            return Err(ckpt_err(path, format!("metadata key {k:?} is reserved")));
        }
        info.insert(k.clone(), v.clone());
    }
    info.insert(KEY_VERSION.into(), FORMAT_VERSION.to_string());
    info.insert(KEY_SPEC.into(), model.spec().to_toml());
    info.insert(KEY_SEED.into(), model.seed().to_string());
    let frozen: Vec<&str> = model.params().iter().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect();
    info.insert(KEY_TRAINABLE.into(), frozen.join(","));

    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.value.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    safetensors::serialize_to_file(views, Some(info), path).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
    let version: u32 = metadata
        .remove(KEY_VERSION)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_err(path, "missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let spec_text = metadata.remove(KEY_SPEC).ok_or_else(|| ckpt_err(path, "missing cascade_spec"))?;
    let spec = CascadeSpec::from_toml(&spec_text).map_err(|e| ckpt_err(path, e.to_string()))?;
    let seed: u64 = metadata
        .remove(KEY_SEED)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_err(path, "missing seed"))?;
    let frozen: Vec<String> = metadata
        .remove(KEY_TRAINABLE)
        .map(|s| s.split(',').filter(|n| !n.is_empty()).map(String::from).collect())
        .unwrap_or_default();

    let tensors = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut store = ParamStore::new();
    let mut named = tensors.tensors();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, view) in named {
        if view.dtype() != Dtype::F32 {
            return Err(ckpt_err(path, format!("tensor {name} is {:?}, expected F32", view.dtype())));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let trainable = !frozen.contains(&name);
        store.insert(name, view.shape().to_vec(), values, trainable);
    }
    let model = StackUNet::from_parts(spec, seed, store).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(Checkpoint { model, metadata })
}
