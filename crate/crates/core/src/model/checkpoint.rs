//! Model serialization: one JSON manifest line, then a raw little-endian
//! f32 payload holding every tensor back to back in store order.
//!
//! The manifest pins the config, stage, partitions, and the experiment-spec
//! hash the model was produced under, so artifacts from different
//! experiment definitions cannot be mixed silently. Loading rebuilds the
//! store and revalidates it against the stage schema, which catches
//! renamed, reshaped, or repartitioned tensors as well as truncation.

use super::{Model, ModelConfig, ParamStore, Partition, Stage};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// Hash of the experiment definition this model belongs to.
    pub spec_hash: String,
    pub stage: Stage,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

/// Writes the model as manifest line + f32 payload. Values are stored as
/// f32 regardless of the in-memory precision.
pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, spec_hash: &str) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0usize;
    for (name, partition, t) in model.store.iter() {
        tensors.push(TensorRecord {
            name: name.to_string(),
            partition,
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let manifest = CheckpointManifest {
        format: FORMAT,
        spec_hash: spec_hash.to_string(),
        stage: model.stage,
        config: model.cfg.clone(),
        tensors,
    };
    let mut payload = Vec::with_capacity(offset * 4);
    for (_, _, t) in model.store.iter() {
        for &v in t.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let line = serde_json::to_string(&manifest)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint back. When `expected_spec` is given, a different
/// stored hash is refused outright. The manifest is returned alongside the
/// model so callers can inspect provenance.
pub fn load_checkpoint<T: Real>(
    path: &Path,
    expected_spec: Option<&str>,
) -> Result<(Model<T>, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: no manifest line", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: format {} unsupported (expected {FORMAT})",
            path.display(),
            manifest.format
        )));
    }
    if let Some(expected) = expected_spec {
        if manifest.spec_hash != expected {
            return Err(Error::SpecMismatch {
                path: path.display().to_string(),
                found: manifest.spec_hash,
                expected: expected.to_string(),
            });
        }
    }
    let payload = &bytes[nl + 1..];
    let total: usize = manifest.tensors.iter().map(|r| r.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: payload holds {} bytes, manifest declares {}",
            path.display(),
            payload.len(),
            total * 4
        )));
    }
    let mut store = ParamStore::new();
    let mut expect_offset = 0usize;
    for rec in &manifest.tensors {
        if rec.offset != expect_offset {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {:?} at offset {}, expected {}",
                path.display(),
                rec.name,
                rec.offset,
                expect_offset
            )));
        }
        if rec.shape.iter().product::<usize>() != rec.len {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {:?} shape {:?} disagrees with len {}",
                path.display(),
                rec.name,
                rec.shape,
                rec.len
            )));
        }
        expect_offset += rec.len;
        let start = rec.offset * 4;
        let data: Vec<T> = payload[start..start + rec.len * 4]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(&rec.name, rec.partition, Tensor::new(rec.shape.clone(), data))?;
    }
    let model = Model::from_store(manifest.config.clone(), manifest.stage, store)?;
    Ok((model, manifest))
}
