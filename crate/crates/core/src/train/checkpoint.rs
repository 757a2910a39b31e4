//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `ALMCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! the payload of little-endian `f64` values: every tensor in manifest order,
//! followed by the Adam first moments and then the second moments in the same
//! order. The manifest carries a SHA-256 digest of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::curriculum::{Cursor, MetricRow, TrainState};
use super::optimizer::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{ModuleGroup, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"ALMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ModuleGroup,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements into the parameter section of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub seed: u64,
    pub cursor: Cursor,
    pub adam_step: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub tensors: Vec<TensorEntry>,
    pub metrics: Vec<MetricRow>,
    pub payload_values: usize,
    pub payload_sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the state atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, state: &TrainState, model: &ModelConfig) -> Result<()> {
    let n = state.params.num_scalars();
    let mut payload = Vec::with_capacity(3 * n * 8);
    for section in [
        state.params.tensors().iter().map(|t| &t.data).collect::<Vec<_>>(),
        state.adam.m.iter().collect(),
        state.adam.v.iter().collect(),
    ] {
        for x in section.into_iter().flatten() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut offset = 0;
    let tensors = state
        .params
        .tensors()
        .iter()
        .map(|t| {
            let e = TensorEntry { name: t.name.clone(), group: t.group, shape: t.shape.clone(), offset };
            offset += t.numel();
            e
        })
        .collect();
    let manifest = Manifest {
        model: model.clone(),
        seed: state.seed,
        cursor: state.cursor,
        adam_step: state.adam.step,
        adam_beta1: state.adam.cfg.beta1,
        adam_beta2: state.adam.cfg.beta2,
        adam_eps: state.adam.cfg.eps,
        tensors,
        metrics: state.metrics.clone(),
        payload_values: 3 * n,
        payload_sha256: digest(&payload),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads the manifest only.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map(|(m, _)| m)
}

fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(Error::Corrupt("manifest truncated".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Corrupt(format!("unreadable manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != manifest.payload_values * 8 {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_values * 8
        )));
    }
    if digest(payload) != manifest.payload_sha256 {
        return Err(Error::Corrupt("payload digest mismatch".into()));
    }
    Ok((manifest, payload))
}

/// Loads a checkpoint into a fresh state. Nothing is returned unless the
/// whole file verifies.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, payload) = parse(&bytes)?;
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let n: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if 3 * n != values.len() {
        return Err(Error::Corrupt("tensor shapes disagree with payload size".into()));
    }
    let section = |base: usize| -> Vec<Vec<f64>> {
        manifest
            .tensors
            .iter()
            .map(|t| {
                let start = base + t.offset;
                values[start..start + t.shape.iter().product::<usize>()].to_vec()
            })
            .collect()
    };
    let params = ParamSet::from_tensors(
        manifest
            .tensors
            .iter()
            .zip(section(0))
            .map(|(t, data)| Tensor { name: t.name.clone(), group: t.group, shape: t.shape.clone(), data })
            .collect(),
    );
    let adam = Adam {
        cfg: AdamConfig { beta1: manifest.adam_beta1, beta2: manifest.adam_beta2, eps: manifest.adam_eps },
        m: section(n),
        v: section(2 * n),
        step: manifest.adam_step,
    };
    let state = TrainState { params, adam, seed: manifest.seed, cursor: manifest.cursor, metrics: manifest.metrics };
    Ok((state, manifest.model))
}

/// Loads a checkpoint and checks it matches the expected model layout.
pub fn load_checkpoint_for(path: &Path, model: &ModelConfig, skeleton: &ParamSet) -> Result<TrainState> {
    let (state, cfg) = load_checkpoint(path)?;
    if &cfg != model || !state.params.same_layout(skeleton) {
        return Err(Error::Incompatible(format!(
            "checkpoint {} was written for a different model configuration",
            path.display()
        )));
    }
    Ok(state)
}
