//! Checkpoint files (version 1).
//!
//! Layout: the 9-byte magic `NMXCKPT1\n`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every tensor's values as little-endian
//! `f64` in header order (row-major). The header records the model config,
//! training counters, the epoch's metrics and each tensor's name, shape and
//! whether it is trainable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::trainer::{EpochMetrics, Phase, TrainState};

pub const MAGIC: &[u8; 9] = b"NMXCKPT1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub metrics: Option<EpochMetrics>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let store = &state.model.store;
    let header = CheckpointHeader {
        version: VERSION,
        model: state.model.config.clone(),
        epoch: state.epoch,
        step: state.step,
        phase: state.phase,
        metrics: state.history.last().cloned(),
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Format { kind: "checkpoint", path: path.to_path_buf(), reason };
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("missing magic".into()))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(bad("truncated header".into()));
    }
    let (json, mut data) = rest.split_at(len);
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }

    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(format!("truncated data for {}", t.name)));
        }
        let (chunk, tail) = data.split_at(8 * n);
        data = tail;
        let values = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let value = Tensor::from_shape_vec(t.shape.clone(), values).map_err(|e| bad(e.to_string()))?;
        if t.trainable {
            store.add(t.name.clone(), value);
        } else {
            store.add_buffer(t.name.clone(), value);
        }
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    let mut model = Model::new(&header.model, 0)?;
    model.store.load_from(&store).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { header, model })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
