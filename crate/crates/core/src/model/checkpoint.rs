//! Tensor checkpoint files.
//!
//! Layout: `u64` little-endian header length, a JSON header, then the f32
//! little-endian payload. The header carries the model config, free-form
//! metadata and a tensor directory with shapes and byte offsets into the
//! payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FusionModel, ModelConfig, Params, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Header plus tensors keyed by name.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn write_tensor_file<F: Real>(
    path: impl AsRef<Path>,
    kind: &str,
    config: Value,
    meta: Value,
    params: &[(&str, &dyn Params<F>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (prefix, p) in params {
        p.visit(prefix, &mut |name, shape, data| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_f32().expect("finite").to_le_bytes());
            }
        });
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config,
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("missing header length".into()))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::json(path, e))?;
    let payload = &bytes[8 + hlen..];
    let mut tensors = HashMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = payload
            .get(t.offset..t.offset + 4 * n)
            .ok_or_else(|| bad(format!("tensor {} runs past the payload", t.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(t.name.clone(), (t.shape.clone(), data));
    }
    Ok(TensorFile { header, tensors })
}

impl TensorFile {
    /// Copies every tensor under `prefix` into `params`, checking shapes.
    pub fn load_into<F: Real>(
        &self,
        prefix: &str,
        params: &mut dyn Params<F>,
        path: &Path,
    ) -> Result<()> {
        let mut err = None;
        params.visit_mut(prefix, &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some((s, v)) if s == shape => {
                    for (d, x) in data.iter_mut().zip(v) {
                        *d = F::from_f32(*x).expect("f32 fits");
                    }
                }
                Some((s, _)) => {
                    err = Some(format!(
                        "tensor {name} has shape {s:?}, model expects {shape:?}"
                    ))
                }
                None => err = Some(format!("tensor {name} missing")),
            }
        });
        match err {
            Some(msg) => Err(Error::Format {
                path: path.to_path_buf(),
                msg,
            }),
            None => Ok(()),
        }
    }
}

pub const FUSION_KIND: &str = "fusion";

impl<F: Real> FusionModel<F> {
    pub fn save(&self, path: impl AsRef<Path>, meta: Value) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        write_tensor_file(path, FUSION_KIND, config, meta, &[("", self)])
    }

    /// Structural model with all-zero weights for `config`.
    pub fn empty(config: ModelConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = Self::new(config, &mut rng)?;
        m.scale(F::zero());
        Ok(m)
    }

    pub fn from_tensor_file(
        file: &TensorFile,
        prefix: &str,
        config: ModelConfig,
        path: &Path,
    ) -> Result<Self> {
        let mut m = Self::empty(config)?;
        file.load_into(prefix, &mut m, path)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Value)> {
        let path = path.as_ref();
        let file = read_tensor_file(path)?;
        if file.header.kind != FUSION_KIND {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "expected a {FUSION_KIND} checkpoint, found {}",
                    file.header.kind
                ),
            });
        }
        let config: ModelConfig =
            serde_json::from_value(file.header.config.clone()).map_err(|e| Error::json(path, e))?;
        let m = Self::from_tensor_file(&file, "", config, path)?;
        Ok((m, file.header.meta))
    }
}
