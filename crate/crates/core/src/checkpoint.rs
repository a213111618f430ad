//! Checkpoint container.
//!
//! ```text
//! "XFCK"                     4 bytes
//! version                    u32 LE (currently 1)
//! header length              u64 LE
//! header                     UTF-8 JSON (see `CheckpointHeader`)
//! parameter data             f64 LE, every tensor row-major, in header order
//! ```
//!
//! Random streams in training are pure functions of the run seed and the
//! step counter, so the seed and step recorded in the header are the full
//! random state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"XFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Fingerprint of the run configuration that produced the weights.
    pub fingerprint: String,
    /// Fingerprint of the dataset the weights were trained on.
    pub data_fingerprint: String,
    pub seed: u64,
    /// Optimizer steps taken per completed stage.
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<ParamEntry>,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let store = &model.store;
    let params: Vec<ParamEntry> = store
        .ids()
        .map(|id| {
            let (rows, cols) = store.value(id).shape();
            ParamEntry {
                name: store.name(id).to_string(),
                rows,
                cols,
            }
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.cfg.clone(),
        meta: meta.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * store.num_scalars());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in store.ids() {
        for v in &store.value(id).data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bad = |reason: String| Error::Format {
        what: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(bad("missing XFCK magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let mut data = &bytes[16 + len..];
    let mut store = ParamStore::new();
    for p in &header.params {
        let n = p.rows * p.cols;
        if data.len() < 8 * n {
            return Err(bad(format!("data ends inside parameter {}", p.name)));
        }
        let vals = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        store.add(p.name.clone(), Tensor::from_vec(p.rows, p.cols, vals));
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    let model = Model::with_params(&header.model, store).map_err(|e| bad(e.to_string()))?;
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::proposal::ProposalConfig;
    use crate::scene_synth::{generate_scene, SynthConfig};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            fingerprint: "run".into(),
            data_fingerprint: "data".into(),
            seed: 3,
            stage1_steps: 10,
            stage2_steps: 0,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d: 16,
            proposal: ProposalConfig {
                num_queries: 8,
                ..ProposalConfig::default()
            },
            fusion: FusionConfig {
                order: "(CL)1".into(),
                encoder_layers: 1,
                ..FusionConfig::default()
            },
            init_seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = Model::new(&small()).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            model
                .store
                .value_mut(id)
                .data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += 1e-3 * i as f64);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xfck");
        save(&path, &model, &meta()).unwrap();
        let (back, m) = load(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.store, model.store);
        let s = generate_scene(&SynthConfig::default(), 0).unwrap();
        assert_eq!(back.detect(&s, true).unwrap(), model.detect(&s, true).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = Model::new(&small()).unwrap();
        let bytes = encode(&model, &meta()).unwrap();
        let p = Path::new("x");
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'Y';
        assert!(decode(&magic, p).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version, p).is_err());
    }
}
