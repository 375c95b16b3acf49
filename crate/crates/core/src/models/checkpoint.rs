//! Checkpoint file: the shared checksummed container with a JSON header
//! (config, dtype, metadata, parameter names and shapes) and the parameter
//! arrays as row-major little-endian values in registration order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CheckpointMeta, ModelConfig, ModelError, ParamSet, Scalar, Seq2SeqModel};
use crate::container::{self, PayloadReader};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CAPCKPT\0";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    dtype: String,
    meta: CheckpointMeta,
    params: Vec<(String, (usize, usize))>,
}

pub fn save_checkpoint<T: Scalar>(model: &Seq2SeqModel<T>, path: &Path) -> Result<(), ModelError> {
    let ps = model.params();
    let header = CheckpointHeader {
        config: *model.config(),
        dtype: T::DTYPE.to_string(),
        meta: model.meta,
        params: ps.names.iter().cloned().zip(ps.values.iter().map(|v| v.dim())).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let mut payload = Vec::with_capacity(ps.total_size() * T::BYTES);
    for v in &ps.values {
        for &x in v.iter() {
            x.write_le(&mut payload);
        }
    }
    let bytes = container::encode(MAGIC, CHECKPOINT_SCHEMA_VERSION, &header, &payload);
    container::write_atomic(path, &bytes)?;
    Ok(())
}

/// Load a checkpoint in INFERENCE mode.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Seq2SeqModel<T>, ModelError> {
    let bytes = container::read_file(path)?;
    let c = container::decode(path, &bytes, MAGIC, "checkpoint", CHECKPOINT_SCHEMA_VERSION)?;
    let h: CheckpointHeader =
        serde_json::from_slice(&c.header).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    if h.dtype != T::DTYPE {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint stores {} parameters, requested {}",
            h.dtype,
            T::DTYPE
        )));
    }
    let mut reader = PayloadReader::new(&c.payload);
    let mut names = Vec::with_capacity(h.params.len());
    let mut values = Vec::with_capacity(h.params.len());
    for (name, (r, cols)) in h.params {
        let n = r * cols;
        let raw = reader
            .take(n * T::BYTES)
            .ok_or_else(|| ModelError::Corrupt(format!("payload ends inside {name}")))?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        values.push(Array2::from_shape_vec((r, cols), data).map_err(|e| ModelError::Corrupt(e.to_string()))?);
        names.push(name);
    }
    if !reader.is_exhausted() {
        return Err(ModelError::Corrupt("trailing payload bytes".into()));
    }
    Seq2SeqModel::from_parts(h.config, ParamSet { names, values }, h.meta)
}

/// Load a checkpoint and require its config to equal `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<Seq2SeqModel<T>, ModelError> {
    let model = load_checkpoint::<T>(path)?;
    if model.config() != expected {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
