//! Checkpoint directories: `manifest.json` plus little-endian f32
//! `weights.bin`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Normalization, CIFAR100_NORMALIZATION};
use crate::error::{Error, Result};
use crate::label::ModelConfig;
use crate::network::build_graph;
use crate::tensor::{DType, Tensor};
use crate::train::{TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MOMENTUM_PREFIX: &str = "momentum:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

/// Shuffle and augmentation streams are derived from `seed` and the epoch,
/// so the next epoch index is the whole generator state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub normalization: Normalization,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(dir: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save(dir: &Path, trainer: &Trainer) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, &Tensor<f32>)> = trainer.net.state_tensors();
    let params = trainer.net.params();
    named.extend(
        params
            .iter()
            .zip(trainer.velocity())
            .map(|(p, v)| (format!("{MOMENTUM_PREFIX}{}", p.name), v)),
    );
    let mut weights = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: DType::F32.as_str().to_string(),
            byte_offset: weights.len() as u64,
        });
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        label: trainer.model.label(),
        model: trainer.model.clone(),
        train: trainer.config.clone(),
        epoch: trainer.epochs_completed,
        rng: RngState {
            algorithm: "chacha8".into(),
            seed: trainer.config.seed,
            next_stream: trainer.epochs_completed as u64,
        },
        normalization: CIFAR100_NORMALIZATION,
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| ckpt_err(dir, e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, weights).map_err(|e| Error::io(&wpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(dir, format!("malformed manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(dir, format!("unsupported format version {}", m.format_version)));
    }
    if m.label != m.model.label() {
        return Err(ckpt_err(dir, format!("label {} disagrees with model targets {}", m.label, m.model.label())));
    }
    Ok(m)
}

/// Rebuilds the graph from the manifest and fills every tensor, checking
/// names and shapes.
pub fn load(dir: &Path) -> Result<Trainer> {
    let m = read_manifest(dir)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut stored: HashMap<&str, &TensorEntry> = HashMap::new();
    for e in &m.tensors {
        if e.dtype != DType::F32.as_str() {
            return Err(ckpt_err(dir, format!("tensor {} has dtype {}, expected f32", e.name, e.dtype)));
        }
        if stored.insert(e.name.as_str(), e).is_some() {
            return Err(ckpt_err(dir, format!("tensor {} listed twice", e.name)));
        }
    }
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let e = stored.get(name).ok_or_else(|| ckpt_err(dir, format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(ckpt_err(dir, format!("tensor {name}: stored shape {:?}, network expects {:?}", e.shape, shape)));
        }
        let start = e.byte_offset as usize;
        let end = start + 4 * shape.iter().product::<usize>();
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| ckpt_err(dir, format!("tensor {name}: bytes {start}..{end} beyond weights.bin length {}", bytes.len())))?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    };
    let mut net = build_graph::<f32>(&m.model, m.train.seed)?;
    let mut used = 0;
    net.visit_state_mut(|name, t| {
        let values = read(name, t.shape())?;
        t.data_mut().copy_from_slice(&values);
        used += 1;
        Ok(())
    })?;
    let mut velocity = Vec::new();
    for p in net.params() {
        let name = format!("{MOMENTUM_PREFIX}{}", p.name);
        velocity.push(Tensor::new(p.value.shape().to_vec(), read(&name, p.value.shape())?)?);
        used += 1;
    }
    if used != m.tensors.len() {
        return Err(ckpt_err(dir, format!("{} stored tensors are not part of the network", m.tensors.len() - used)));
    }
    Trainer::from_parts(net, m.train, Some(velocity), m.epoch)
}
