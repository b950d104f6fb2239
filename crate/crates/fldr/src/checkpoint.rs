//! Checkpoint and basis files: safetensors archives of named float32 tensors
//! with a JSON metadata record.
//!
//! All metadata lives in one JSON string under a single header key so the
//! file bytes do not depend on hash-map iteration order.

use std::path::Path;

use fldr_core::fldr::ProjectionBasis;
use fldr_core::pipeline::Model;
use fldr_core::training::ModelCheckpoint;
use fldr_core::Tensor;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{FldrError, Result};

const META_KEY: &str = "fldr";
const CHECKPOINT_FORMAT: &str = "fldr-checkpoint-1";
const BASIS_FORMAT: &str = "fldr-basis-1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    epoch: usize,
    score: f64,
    d: usize,
    k: usize,
    /// Flat TOML training configuration.
    config: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisMeta {
    format: String,
    d: usize,
    k: usize,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn encode(tensors: &[(String, Tensor<f32>)], meta: String) -> Result<Vec<u8>, safetensors::SafeTensorError> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors.iter().map(|(n, t)| (n.clone(), to_bytes(t), t.shape().to_vec())).collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<Result<Vec<_>, _>>()?;
    safetensors::serialize(views, Some([(META_KEY.to_string(), meta)].into_iter().collect()))
}

/// Named tensors plus the JSON metadata record.
type Decoded = (Vec<(String, Tensor<f32>)>, String);

fn decode(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    let bad = |msg: String| FldrError::Checkpoint { path: path.to_path_buf(), msg };
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().as_ref().and_then(|m| m.get(META_KEY)).cloned().ok_or_else(|| bad("missing metadata record".into()))?;
    let mut names: Vec<String> = st.names().into_iter().map(String::from).collect();
    names.sort();
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let view = st.tensor(&name).map_err(|e| bad(e.to_string()))?;
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!("tensor {name} is {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::from_vec(view.shape(), data).map_err(|e| bad(e.to_string()))?;
        tensors.push((name, t));
    }
    Ok((tensors, meta))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FldrError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| FldrError::io(path, e))
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        epoch: ckpt.epoch,
        score: ckpt.score,
        d: ckpt.model.d(),
        k: ckpt.model.k(),
        config: RunConfig::from_train(&ckpt.config).to_toml(),
    };
    let bytes = encode(&ckpt.model.named_tensors(), serde_json::to_string(&meta).expect("metadata serialises"))
        .map_err(|e| FldrError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| FldrError::io(path, e))?;
    let (tensors, meta) = decode(path, &bytes)?;
    let bad = |msg: String| FldrError::Checkpoint { path: path.to_path_buf(), msg };
    let meta: CheckpointMeta = serde_json::from_str(&meta).map_err(|e| bad(e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format {:?}", meta.format)));
    }
    let config = RunConfig::parse(&meta.config).map_err(|e| bad(e.message().to_string()))?.resolve();
    let model = Model::from_named_tensors(&tensors).map_err(|e| bad(e.to_string()))?;
    if model.d() != meta.d || model.k() != meta.k {
        return Err(bad(format!("metadata says d={}, k={} but tensors give d={}, k={}", meta.d, meta.k, model.d(), model.k())));
    }
    Ok(ModelCheckpoint { model, config, epoch: meta.epoch, score: meta.score })
}

/// Writes the projection basis alone (`U` as `[d², k]`, `mean` as `[d²]`).
pub fn save_basis(path: &Path, basis: &ProjectionBasis<f32>) -> Result<()> {
    let meta = BasisMeta { format: BASIS_FORMAT.into(), d: basis.d(), k: basis.k() };
    let tensors = [("U".to_string(), basis.u.clone()), ("mean".to_string(), basis.mean.clone())];
    let bytes = encode(&tensors, serde_json::to_string(&meta).expect("metadata serialises"))
        .map_err(|e| FldrError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
    write_file(path, &bytes)
}

pub fn load_basis(path: &Path) -> Result<ProjectionBasis<f32>> {
    let bytes = std::fs::read(path).map_err(|e| FldrError::io(path, e))?;
    let (tensors, meta) = decode(path, &bytes)?;
    let bad = |msg: String| FldrError::Checkpoint { path: path.to_path_buf(), msg };
    let meta: BasisMeta = serde_json::from_str(&meta).map_err(|e| bad(e.to_string()))?;
    if meta.format != BASIS_FORMAT {
        return Err(bad(format!("unsupported format {:?}", meta.format)));
    }
    let get = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone()).ok_or_else(|| bad(format!("missing tensor {n}")));
    ProjectionBasis::new(meta.d, meta.k, get("U")?, get("mean")?).map_err(|e| bad(e.to_string()))
}
