use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, TrainHistory};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore};

/// Run metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model_config_hash: String,
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub best_val_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

fn to_bytes<F: Float>(v: &[F]) -> Vec<u8> {
    v.iter().flat_map(|x| (x.f64() as f32).to_le_bytes()).collect()
}

fn from_bytes<F: Float>(b: &[u8]) -> Vec<F> {
    b.chunks_exact(4).map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect()
}

/// Encodes parameters (and optionally optimizer moments) as safetensors with
/// the manifest as JSON metadata. Values are stored as little-endian f32.
pub fn encode<F: Float>(store: &ParamStore<F>, manifest: &CheckpointManifest, optimizer: Option<&AdamW<F>>) -> Result<Vec<u8>> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, p) in store.iter() {
        buffers.push((format!("param/{}", p.name), p.shape.clone(), to_bytes(&p.value)));
        if let Some((m, v)) = optimizer.and_then(|o| o.moments(id)) {
            buffers.push((format!("adam_m/{}", p.name), p.shape.clone(), to_bytes(m)));
            buffers.push((format!("adam_v/{}", p.name), p.shape.clone(), to_bytes(v)));
        }
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::Checkpoint(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([("manifest".to_string(), serde_json::to_string(manifest)?)]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save<F: Float>(path: &Path, store: &ParamStore<F>, manifest: &CheckpointManifest, optimizer: Option<&AdamW<F>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(store, manifest, optimizer)?)?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = meta.metadata().as_ref().and_then(|m| m.get("manifest")).ok_or_else(|| Error::Checkpoint("no manifest".into()))?;
    Ok(serde_json::from_str(json)?)
}

/// Overwrites every parameter of `store` (matched by name and shape) and, if
/// given, restores the optimizer moments. Returns the manifest.
pub fn load_into<F: Float>(bytes: &[u8], store: &mut ParamStore<F>, optimizer: Option<&mut AdamW<F>>) -> Result<CheckpointManifest> {
    let manifest = read_manifest(bytes)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let fetch = |key: &str, shape: &[usize]| -> Result<Vec<F>> {
        let t = st.tensor(key).map_err(|_| Error::Checkpoint(format!("missing tensor {key}")))?;
        if t.dtype() != Dtype::F32 || t.shape() != shape {
            return Err(Error::Checkpoint(format!("tensor {key} has {:?} {:?}, expected F32 {shape:?}", t.dtype(), t.shape())));
        }
        Ok(from_bytes(t.data()))
    };
    let ids: Vec<_> = store.ids().collect();
    let mut moments = Vec::new();
    for id in ids {
        let (name, shape) = (store.get(id).name.clone(), store.get(id).shape.clone());
        store.get_mut(id).value = fetch(&format!("param/{name}"), &shape)?;
        if store.get(id).trainable && st.names().contains(&format!("adam_m/{name}").as_str()) {
            moments.push((id, fetch(&format!("adam_m/{name}"), &shape)?, fetch(&format!("adam_v/{name}"), &shape)?));
        }
    }
    if let Some(opt) = optimizer {
        opt.restore(manifest.step, moments);
    }
    Ok(manifest)
}

pub fn load<F: Float>(path: &Path, store: &mut ParamStore<F>, optimizer: Option<&mut AdamW<F>>) -> Result<CheckpointManifest> {
    if !path.is_file() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    load_into(&std::fs::read(path)?, store, optimizer)
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
