//! Checkpoint format: a JSON manifest (config, seed, tensor directory) plus
//! one binary blob of row-major IEEE-754 f32 little-endian values.

use crate::error::{Result, RomaError};
use crate::model::{Expert, Layer, Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f32 values.
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_list(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("embedding".to_string(), vec![c.vocab, c.d_model])];
    for l in 0..c.n_layers {
        out.push((format!("mixer.{l}"), vec![c.d_model, c.d_model]));
        out.push((format!("router_w.{l}"), vec![c.n_experts, c.d_model]));
        out.push((format!("router_b.{l}"), vec![c.n_experts]));
        for e in 0..c.n_experts {
            out.push((format!("expert_w1.{l}.{e}"), vec![c.d_ff, c.d_model]));
            out.push((format!("expert_w2.{l}.{e}"), vec![c.d_model, c.d_ff]));
        }
    }
    out.push(("readout".to_string(), vec![c.n_classes, c.d_model]));
    out
}

fn blocks_of(model: &Model) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![&model.embedding];
    for layer in &model.layers {
        out.push(&layer.mixer);
        out.push(&layer.router_w);
        out.push(&layer.router_b);
        for e in &layer.experts {
            out.push(&e.w1);
            out.push(&e.w2);
        }
    }
    out.push(&model.readout);
    out
}

/// Write `dir/manifest.json` and `dir/weights.bin`.
pub fn save_checkpoint(model: &Model, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RomaError::io(dir, e))?;
    let names = tensor_list(&model.config);
    let blocks = blocks_of(model);
    debug_assert_eq!(names.len(), blocks.len());

    let mut tensors = Vec::with_capacity(names.len());
    let mut blob: Vec<u8> = Vec::new();
    for ((name, shape), values) in names.into_iter().zip(blocks) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        tensors.push(TensorEntry {
            name,
            shape,
            offset: blob.len(),
            length: values.len(),
        });
        for &v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let manifest = Manifest {
        config: model.config,
        seed,
        tensors,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).unwrap();
    std::fs::write(&manifest_path, json).map_err(|e| RomaError::io(&manifest_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let mut f = std::fs::File::create(&weights_path).map_err(|e| RomaError::io(&weights_path, e))?;
    f.write_all(&blob).map_err(|e| RomaError::io(&weights_path, e))?;
    Ok(())
}

/// Load a checkpoint, validating manifest shapes against the config and the
/// blob length against the tensor directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| RomaError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json).map_err(|e| RomaError::Parse {
        path: manifest_path.clone(),
        line: 0,
        detail: e.to_string(),
    })?;
    manifest.config.validate()?;

    let expected = tensor_list(&manifest.config);
    if manifest.tensors.len() != expected.len() {
        return Err(RomaError::CheckpointMismatch(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(RomaError::CheckpointMismatch(format!(
                "tensor '{}' with shape {:?} does not match expected '{}' {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.length != shape.iter().product::<usize>() {
            return Err(RomaError::CheckpointMismatch(format!(
                "tensor '{}' length {} inconsistent with shape {:?}",
                entry.name, entry.length, entry.shape
            )));
        }
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let mut blob = Vec::new();
    std::fs::File::open(&weights_path)
        .map_err(|e| RomaError::io(&weights_path, e))?
        .read_to_end(&mut blob)
        .map_err(|e| RomaError::io(&weights_path, e))?;

    let mut read_tensor = |entry: &TensorEntry| -> Result<Vec<f64>> {
        let end = entry.offset + entry.length * 4;
        if end > blob.len() {
            return Err(RomaError::CheckpointMismatch(format!(
                "blob truncated: tensor '{}' needs bytes {}..{end} but blob has {}",
                entry.name,
                entry.offset,
                blob.len()
            )));
        }
        Ok(blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    };

    let c = manifest.config;
    let mut it = manifest.tensors.iter();
    let embedding = read_tensor(it.next().unwrap())?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for _ in 0..c.n_layers {
        let mixer = read_tensor(it.next().unwrap())?;
        let router_w = read_tensor(it.next().unwrap())?;
        let router_b = read_tensor(it.next().unwrap())?;
        let mut experts = Vec::with_capacity(c.n_experts);
        for _ in 0..c.n_experts {
            let w1 = read_tensor(it.next().unwrap())?;
            let w2 = read_tensor(it.next().unwrap())?;
            experts.push(Expert { w1, w2 });
        }
        layers.push(Layer {
            mixer,
            router_w,
            router_b,
            experts,
        });
    }
    let readout = read_tensor(it.next().unwrap())?;

    Ok((
        Model {
            config: c,
            embedding,
            layers,
            readout,
        },
        manifest,
    ))
}

/// Load and require an exact config match.
pub fn load_checkpoint_expect(dir: &Path, config: &ModelConfig) -> Result<(Model, Manifest)> {
    let (model, manifest) = load_checkpoint(dir)?;
    if &manifest.config != config {
        return Err(RomaError::CheckpointMismatch(format!(
            "checkpoint config {:?} does not match expected {:?}",
            manifest.config, config
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_experts: 3,
            top_k: 2,
            d_model: 4,
            d_ff: 5,
            vocab: 6,
            n_classes: 3,
            seq_len: 4,
        }
    }

    #[test]
    fn roundtrip_is_exact_at_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(&cfg(), 9).unwrap();
        save_checkpoint(&m, 9, dir.path()).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.seed, 9);
        // a second save/load cycle is bit-identical: f32 -> f64 -> f32 is lossless
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, 9, dir2.path()).unwrap();
        let (loaded2, _) = load_checkpoint(dir2.path()).unwrap();
        assert_eq!(loaded.full_hash(), loaded2.full_hash());
        // every value agrees with the f32 rounding of the original
        for (a, b) in m.embedding.iter().zip(&loaded.embedding) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(&cfg(), 1).unwrap();
        save_checkpoint(&m, 1, dir.path()).unwrap();
        let mut other = cfg();
        other.n_experts = 4;
        let err = load_checkpoint_expect(dir.path(), &other).unwrap_err();
        assert!(matches!(err, RomaError::CheckpointMismatch(_)));
    }

    #[test]
    fn truncated_blob_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(&cfg(), 2).unwrap();
        save_checkpoint(&m, 2, dir.path()).unwrap();
        let weights = dir.path().join(WEIGHTS_FILE);
        let blob = std::fs::read(&weights).unwrap();
        std::fs::write(&weights, &blob[..blob.len() - 8]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
    }
}
