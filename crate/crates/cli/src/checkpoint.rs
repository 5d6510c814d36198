//! Single-file checkpoints: JSON with the model configuration, the build
//! seed, and every parameter tensor as base64 little-endian f64 bytes.
//! Loading rebuilds the model from the embedded config and overwrites the
//! freshly initialized values by parameter name, so file and code structure
//! must agree exactly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use base64::Engine;
use evtrack_core::tracker::{HybridModel, TrackerConfig};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: TrackerConfig,
    seed: u64,
    params: Vec<ParamRecord>,
}

fn encode(values: &ArrayD<f64>) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode(data: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .context("corrupt base64 parameter data")?;
    if bytes.len() % 8 != 0 {
        bail!("parameter byte length {} not a multiple of 8", bytes.len());
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        bail!(
            "parameter has {} values, shape {:?} wants {}",
            values.len(),
            shape,
            expected
        );
    }
    Ok(ArrayD::from_shape_vec(ndarray::IxDyn(shape), values)?)
}

pub fn save(path: &Path, model: &HybridModel, seed: u64) -> Result<()> {
    let params = model
        .store
        .iter()
        .map(|(_, e)| ParamRecord {
            name: e.name.clone(),
            group: e.group.as_str().to_string(),
            shape: e.value.shape().to_vec(),
            data: encode(&e.value),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.cfg,
        seed,
        params,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string(&file)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// The model plus the seed it was built with.
pub fn load(path: &Path) -> Result<(HybridModel, u64)> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CheckpointFile = serde_json::from_str(&raw).context("malformed checkpoint")?;
    if file.version != CHECKPOINT_VERSION {
        bail!("checkpoint version {} unsupported", file.version);
    }
    let mut model = HybridModel::new(file.config, file.seed)?;
    if file.params.len() != model.store.len() {
        bail!(
            "checkpoint has {} parameters, model built from its config has {}",
            file.params.len(),
            model.store.len()
        );
    }
    for rec in &file.params {
        let id = model
            .store
            .find(&rec.name)
            .with_context(|| format!("checkpoint parameter {} unknown to the model", rec.name))?;
        let value = decode(&rec.data, &rec.shape)?;
        if value.shape() != model.store.value(id).shape() {
            bail!(
                "parameter {} shape {:?} does not match model {:?}",
                rec.name,
                value.shape(),
                model.store.value(id).shape()
            );
        }
        *model.store.value_mut(id) = value;
    }
    Ok((model, file.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> HybridModel {
        let cfg = TrackerConfig {
            ann_dim: 8,
            snn_dim: 8,
            code_dim: 4,
            ann_depth: 2,
            snn_depth: 2,
            fusion_layers: 1,
            heads: 2,
            ann_mlp_hidden: 16,
            snn_mlp_hidden: 16,
            head_hidden: 16,
            time_steps: 2,
            patch: 16,
            template_size: 32,
            search_size: 64,
            ..TrackerConfig::toy()
        };
        HybridModel::new(cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let mut model = tiny_model();
        // make the values distinguishable from a fresh init
        let first = model.store.find("head.w1").unwrap();
        model.store.value_mut(first)[[0, 0]] = 12345.678;
        save(&path, &model, 77).unwrap();
        let (loaded, seed) = load(&path).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(loaded.store.len(), model.store.len());
        for (id, e) in model.store.iter() {
            let l = loaded.store.value(id);
            assert_eq!(l.shape(), e.value.shape());
            for (a, b) in e.value.iter().zip(l.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{}", e.name);
            }
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let model = tiny_model();
        save(&path, &model, 1).unwrap();
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw = raw.replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, raw).unwrap();
        assert!(load(&path).is_err());
        std::fs::write(&path, "{not json").unwrap();
        assert!(load(&path).is_err());
    }
}
