//! Checkpoint persistence: a JSON header (schema hash, model config, tensor
//! manifest) followed by a newline and the raw little-endian 32-bit float
//! payload. Loading verifies the schema hash. Writes go to a temporary file
//! that is renamed into place.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::tensor::Tensor;

use super::{Model, ModelConfig, ParameterStore};

const FORMAT: &str = "flexdoc-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f32 values.
    offset: usize,
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    schema_hash: String,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
    payload_len: usize,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    for (name, param) in model.params.iter() {
        records.push(TensorRecord {
            name: name.clone(),
            shape: param.tensor.shape().to_vec(),
            offset,
            decay: param.decay,
        });
        offset += param.tensor.numel();
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        schema_hash: model.schema.hash(),
        config: model.config.clone(),
        tensors: records,
        payload_len: offset,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(offset * 4);
    for (_, param) in model.params.iter() {
        for &v in param.tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, schema: &Schema) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header delimiter".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    if header.schema_hash != schema.hash() {
        return Err(Error::Checkpoint(format!(
            "schema hash mismatch: checkpoint {} vs schema {}",
            header.schema_hash,
            schema.hash()
        )));
    }
    let payload = &bytes[newline + 1..];
    if payload.len() != header.payload_len * 4 {
        return Err(Error::Checkpoint(format!(
            "payload length {} does not match manifest ({} floats)",
            payload.len(),
            header.payload_len
        )));
    }
    let mut params = ParameterStore::default();
    for record in &header.tensors {
        let numel: usize = record.shape.iter().product();
        let start = record.offset * 4;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` out of payload bounds", record.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(&record.name, Tensor::new(record.shape.clone(), data), record.decay);
    }
    Model::from_parts(schema.clone(), header.config, params)
}
