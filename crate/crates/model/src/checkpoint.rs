//! Checkpoint files: one safetensors map plus a JSON sidecar.
//!
//! Tensor keys are namespaced (`model/…`, `teacher/…`, `optim/…`,
//! `flow/…`). The sidecar records the format version, stage progress, the
//! configuration, host-side state (codebook, distillation center, latent
//! statistics) and a shape manifest for every tensor.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::flow::LatentStats;
use crate::rvq::Codebook;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const TENSOR_FILE: &str = "tensors.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: u8,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Whether the stage ran to completion.
    pub complete: bool,
    pub config: serde_json::Value,
    pub codebook: Option<Codebook>,
    pub center: Option<Vec<f64>>,
    pub latent_stats: Option<LatentStats>,
    /// Features kept for re-seeding dead codebook entries.
    pub reseed_pool: Vec<Vec<f64>>,
    pub shapes: BTreeMap<String, Vec<usize>>,
}

pub fn save(dir: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    let mut meta = meta.clone();
    meta.version = CHECKPOINT_VERSION;
    meta.shapes = tensors.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect();
    let map: HashMap<String, Tensor> = tensors.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
    // Write to temporaries then rename so an interrupted save never leaves a
    // half-written checkpoint behind.
    let tmp_t = dir.join(format!("{TENSOR_FILE}.tmp"));
    let tmp_m = dir.join(format!("{META_FILE}.tmp"));
    candle_core::safetensors::save(&map, &tmp_t)?;
    std::fs::write(&tmp_m, serde_json::to_string_pretty(&meta)?).map_err(|e| ModelError::io(&tmp_m, e))?;
    std::fs::rename(&tmp_t, dir.join(TENSOR_FILE)).map_err(|e| ModelError::io(dir, e))?;
    std::fs::rename(&tmp_m, dir.join(META_FILE)).map_err(|e| ModelError::io(dir, e))?;
    Ok(())
}

pub fn exists(dir: &Path) -> bool {
    dir.join(TENSOR_FILE).is_file() && dir.join(META_FILE).is_file()
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let p = dir.join(META_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| ModelError::io(&p, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
    }
    Ok(meta)
}

pub fn load(dir: &Path, device: &Device) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let meta = load_meta(dir)?;
    let p = dir.join(TENSOR_FILE);
    if !p.is_file() {
        return Err(ModelError::Checkpoint(format!("missing {}", p.display())));
    }
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(&p, device)?.into_iter().collect();
    for (k, shape) in &meta.shapes {
        match tensors.get(k) {
            Some(t) if t.dims() == shape.as_slice() => {}
            Some(t) => return Err(ModelError::Checkpoint(format!("tensor {k} has shape {:?}, manifest says {shape:?}", t.dims()))),
            None => return Err(ModelError::Checkpoint(format!("tensor {k} listed in the manifest is missing"))),
        }
    }
    Ok((meta, tensors))
}

/// Tensors under `namespace/`, with the namespace stripped.
pub fn namespace(tensors: &BTreeMap<String, Tensor>, ns: &str) -> BTreeMap<String, Tensor> {
    let prefix = format!("{ns}/");
    tensors.iter().filter_map(|(k, t)| k.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone()))).collect()
}

/// Adds `map` to `out` under `namespace/`.
pub fn insert_namespace(out: &mut BTreeMap<String, Tensor>, ns: &str, map: BTreeMap<String, Tensor>) {
    for (k, t) in map {
        out.insert(format!("{ns}/{k}"), t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_and_manifest_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("model/w".to_string(), Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap());
        let meta = CheckpointMeta {
            version: 0,
            stage: 1,
            epoch: 2,
            step: 10,
            complete: false,
            config: serde_json::json!({"a": 1}),
            codebook: None,
            center: Some(vec![0.1, 0.2]),
            latent_stats: None,
            reseed_pool: vec![],
            shapes: BTreeMap::new(),
        };
        save(dir.path(), &meta, &tensors).unwrap();
        let (m, t) = load(dir.path(), &Device::Cpu).unwrap();
        assert_eq!(m.epoch, 2);
        assert_eq!(m.shapes["model/w"], vec![2, 3]);
        assert_eq!(namespace(&t, "model")["w"].dims(), [2, 3]);
        let mut bad = m.clone();
        bad.shapes.insert("model/w".into(), vec![3, 2]);
        std::fs::write(dir.path().join(META_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(load(dir.path(), &Device::Cpu).is_err());
    }
}
