//! Checkpoint format: `manifest.json` describing every tensor (name, shape,
//! dtype, byte offset into the blob, parameter group) plus `weights.bin`, a
//! single blob of row-major little-endian f32 values.

use std::path::Path;

use acrec_autodiff::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::model::{ParamGroup, ParameterStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub group: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub item_count: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorMeta>,
}

fn group_tag(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Backbone => "backbone",
        ParamGroup::Perturbation => "perturbation",
    }
}

fn parse_group(tag: &str) -> Result<ParamGroup, ModelError> {
    match tag {
        "backbone" => Ok(ParamGroup::Backbone),
        "perturbation" => Ok(ParamGroup::Perturbation),
        other => Err(ModelError::Checkpoint(format!("unknown group '{other}'"))),
    }
}

pub fn save<F: Scalar>(
    dir: &Path,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| ModelError::Checkpoint(format!("create {}: {e}", dir.display())))?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for entry in store.entries() {
        tensors.push(TensorMeta {
            name: entry.name.clone(),
            shape: entry.tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset: blob.len() as u64,
            group: group_tag(entry.group).to_string(),
        });
        for x in entry.tensor.data() {
            blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: 1,
        item_count: store.item_count(),
        model: cfg.clone(),
        tensors,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)
        .map_err(|e| ModelError::Checkpoint(format!("write manifest: {e}")))?;
    std::fs::write(dir.join(WEIGHTS_FILE), blob)
        .map_err(|e| ModelError::Checkpoint(format!("write weights: {e}")))?;
    Ok(())
}

pub fn load<F: Scalar>(dir: &Path) -> Result<(ParameterStore<F>, Manifest), ModelError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| ModelError::Checkpoint(format!("read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let blob = std::fs::read(dir.join(WEIGHTS_FILE))
        .map_err(|e| ModelError::Checkpoint(format!("read weights: {e}")))?;
    let mut store = ParameterStore::empty();
    for meta in &manifest.tensors {
        if meta.dtype != "f32" {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let numel: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} overruns the weight blob",
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(F::from_f64(v as f64));
        }
        store.insert(
            meta.name.clone(),
            parse_group(&meta.group)?,
            Tensor::new(&meta.shape, data),
        );
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn round_trips_f32_exactly() {
        let cfg = ModelConfig {
            d: 4,
            n: 3,
            layers: 1,
            heads: 2,
            inner: 5,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let store: ParameterStore<f32> = ParameterStore::init(&cfg, 6, 11, 0.02);
        let dir = std::env::temp_dir().join(format!("acrec-ckpt-{}", std::process::id()));
        save(&dir, &store, &cfg).unwrap();
        let (back, manifest) = load::<f32>(&dir).unwrap();
        assert_eq!(manifest.item_count, 6);
        assert_eq!(manifest.model, cfg);
        assert_eq!(store.content_hash(), back.content_hash());
        for (a, b) in store.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn offsets_are_cumulative_byte_positions() {
        let cfg = ModelConfig {
            d: 2,
            n: 2,
            layers: 1,
            heads: 1,
            inner: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let store: ParameterStore<f32> = ParameterStore::init(&cfg, 3, 1, 0.02);
        let dir = std::env::temp_dir().join(format!("acrec-ckpt-off-{}", std::process::id()));
        save(&dir, &store, &cfg).unwrap();
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap(),
        )
        .unwrap();
        let mut expected = 0u64;
        for meta in &manifest.tensors {
            assert_eq!(meta.offset, expected);
            expected += meta.shape.iter().product::<usize>() as u64 * 4;
        }
        let blob_len = std::fs::metadata(dir.join(WEIGHTS_FILE)).unwrap().len();
        assert_eq!(blob_len, expected);
        std::fs::remove_dir_all(&dir).ok();
    }
}
