//! Named-tensor archives on top of the safetensors format.
//!
//! Every archive carries a single metadata entry, [`META_KEY`], holding a
//! JSON document, which keeps the serialized bytes deterministic.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const META_KEY: &str = "styleflow";

pub struct Archive<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub meta: serde_json::Value,
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes tensors and metadata to bytes.
pub fn to_bytes<T: Scalar>(
    tensors: &BTreeMap<String, Tensor<T>>,
    meta: &serde_json::Value,
) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            (name.clone(), bytes, t.shape().to_vec())
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(T::DTYPE, shape.clone(), bytes).map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::State(format!("cannot build tensor view: {e}")))?;
    let info = HashMap::from([(META_KEY.to_string(), meta.to_string())]);
    safetensors::serialize(views, Some(info))
        .map_err(|e| Error::State(format!("cannot serialize archive: {e}")))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, Tensor<T>>,
    meta: &serde_json::Value,
) -> Result<()> {
    write_atomic(path, &to_bytes(tensors, meta)?)
}

/// Reads an archive, converting stored `f32`/`f64` data to `T`.
pub fn load<T: Scalar>(path: &Path) -> Result<Archive<T>> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    from_bytes(&bytes).map_err(|reason| load_err(path, reason))
}

fn from_bytes<T: Scalar>(bytes: &[u8]) -> std::result::Result<Archive<T>, String> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| format!("corrupt archive: {e}"))?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| format!("archive has no '{META_KEY}' metadata entry"))?;
    let meta: serde_json::Value =
        serde_json::from_str(meta).map_err(|e| format!("metadata is not valid JSON: {e}"))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| format!("corrupt archive: {e}"))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.iter() {
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => return Err(format!("tensor '{name}' has unsupported dtype {other:?}")),
        };
        let t = Tensor::from_vec(view.shape(), data).map_err(|e| e.to_string())?;
        tensors.insert(name.to_string(), t);
    }
    Ok(Archive { tensors, meta })
}
