//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The blob is every tensor's values as little-endian `f64`, concatenated
//! in manifest order; the manifest records names, shapes, byte ranges,
//! freeze flags, the architecture and a SHA-256 of the blob. Optimizer
//! state travels in the same blob as tensors of group `state`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelState};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::segmenter::Phase1Trainer;
use crate::tensor::Tensor;

pub const FORMAT: &str = "fsvos-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Param,
    State,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
    pub frozen: bool,
    pub group: TensorGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    /// [`ModelState::content_hash`] of the parameters.
    pub params_hash: String,
    /// Hash of the checkpoint this model was derived from, if any.
    pub source_hash: Option<String>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    /// Non-parameter tensors such as optimizer moments.
    pub state: IndexMap<String, Tensor>,
}

pub fn save_model(dir: &Path, model: &ModelState) -> Result<Manifest> {
    save(dir, model, &IndexMap::new())
}

pub fn save(dir: &Path, model: &ModelState, state: &IndexMap<String, Tensor>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let params = model
        .params
        .iter()
        .map(|(n, p)| (n, &p.value, p.frozen, TensorGroup::Param));
    let extra = state
        .iter()
        .map(|(n, t)| (n.as_str(), t, false, TensorGroup::State));
    for (name, t, frozen, group) in params.chain(extra) {
        let bytes = t.to_le_bytes();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64-le".into(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
            frozen,
            group,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        arch: model.arch.clone(),
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        params_hash: model.content_hash(),
        source_hash: model.source_hash.clone(),
        meta: model.meta.clone(),
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("weights blob hash mismatch".into()));
    }
    let mut params = ParamStore::new();
    let mut state = IndexMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f64-le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if e.len as usize != numel * 8 || end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "bad byte range for `{}`",
                e.name
            )));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.group {
            TensorGroup::Param => {
                params.insert(e.name.clone(), t);
                params.get_mut(&e.name).expect("just inserted").frozen = e.frozen;
            }
            TensorGroup::State => {
                state.insert(e.name.clone(), t);
            }
        }
    }
    let model = ModelState {
        arch: manifest.arch,
        params,
        source_hash: manifest.source_hash,
        meta: manifest.meta,
    };
    if model.content_hash() != manifest.params_hash {
        return Err(Error::Checkpoint("parameter hash mismatch".into()));
    }
    Ok(Checkpoint { model, state })
}

pub fn load_model(dir: &Path) -> Result<ModelState> {
    Ok(load(dir)?.model)
}

const ITERATION_KEY: &str = "phase1.iteration";
const ADAM_STEPS_KEY: &str = "phase1.adam_steps";
const SEED_KEY: &str = "phase1.seed";

/// Save a phase-1 trainer so that [`load_trainer`] resumes it exactly.
pub fn save_trainer(dir: &Path, trainer: &Phase1Trainer) -> Result<Manifest> {
    let mut model = trainer.model.clone();
    model
        .meta
        .insert(ITERATION_KEY.into(), trainer.iteration.to_string());
    model
        .meta
        .insert(ADAM_STEPS_KEY.into(), trainer.adam.steps().to_string());
    model.meta.insert(SEED_KEY.into(), trainer.seed.to_string());
    let state = trainer.adam.state_tensors().into_iter().collect();
    save(dir, &model, &state)
}

pub fn load_trainer(dir: &Path) -> Result<Phase1Trainer> {
    let ck = load(dir)?;
    let get = |key: &str| -> Result<u64> {
        ck.model
            .meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid `{key}` in meta")))
    };
    let (iteration, steps, seed) = (get(ITERATION_KEY)?, get(ADAM_STEPS_KEY)?, get(SEED_KEY)?);
    Ok(Phase1Trainer {
        adam: Adam::from_state(steps, &ck.state),
        iteration: iteration as usize,
        seed,
        model: ck.model,
    })
}
