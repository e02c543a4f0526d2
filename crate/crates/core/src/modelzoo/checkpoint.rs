//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `RPCKPT01`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as raw little-endian `f32` in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, ModelError, ModelParameters, Result, TrainedModel, TrainingMeta};

const MAGIC: &[u8; 8] = b"RPCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    architecture: String,
    spec_hash: String,
    seed: u64,
    training_meta: TrainingMeta,
    spec: ArchitectureSpec,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    model.params.check_against(&model.spec)?;
    let manifest = Manifest {
        architecture: model.spec.name.to_string(),
        spec_hash: model.spec.spec_hash(),
        seed: model.params.init_seed,
        training_meta: model.training_meta.clone(),
        spec: model.spec.clone(),
        tensors: model
            .params
            .names
            .iter()
            .zip(&model.params.shapes)
            .map(|(name, shape)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let n_values: usize = model.params.values.iter().map(Vec::len).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * n_values);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for tensor in &model.params.values {
        for v in tensor {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bad = |msg: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.spec.spec_hash() != manifest.spec_hash {
        return Err(bad("spec hash does not match the stored spec".into()));
    }
    let mut offset = 16 + len;
    let mut params = ModelParameters {
        init_seed: manifest.seed,
        names: Vec::new(),
        shapes: Vec::new(),
        values: Vec::new(),
    };
    for t in manifest.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(format!("tensor `{}` is truncated", t.name)))?;
        offset += 4 * n;
        params.values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        params.names.push(t.name);
        params.shapes.push(t.shape);
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    params.check_against(&manifest.spec)?;
    Ok(TrainedModel {
        spec: manifest.spec,
        params,
        training_meta: manifest.training_meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{build_architecture, ArchName};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = TrainedModel::initialized(build_architecture(ArchName::Cifar), 11).unwrap();
        model.params.values[0][3] = f32::from_bits(0x3f80_0001);
        model.training_meta.regime = "scratch".into();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        let a = fs::read(&path).unwrap();
        save_checkpoint(&back, &path).unwrap();
        assert_eq!(a, fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = TrainedModel::initialized(build_architecture(ArchName::Cifar), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint { .. })
        ));
        fs::write(&path, b"nonsense").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
