//! Checkpoint container.
//!
//! ```text
//! magic   8 bytes   "VPFCCKPT"
//! version u32 LE    container format version
//! hlen    u64 LE    header length in bytes
//! header  hlen      UTF-8 JSON: format_version, weights_version, config,
//!                   tensors [{name, shape, offset}] (offset in f64 elements)
//! data              f64 little-endian, tensors back to back in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{LabError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VPFCCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    weights_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(weights: &ModelWeights, mut out: impl Write) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    weights.for_each_tensor(|name, shape, values| {
        entries.push(TensorEntry { name, shape, offset });
        offset += values.len();
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        weights_version: weights.version,
        config: weights.config.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&data)?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LabError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(LabError::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; hlen];
    input.read_exact(&mut header)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| LabError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(LabError::Checkpoint("header and preamble versions disagree".into()));
    }
    if header.weights_version != super::WEIGHTS_VERSION {
        return Err(LabError::Checkpoint(format!(
            "weights version {} is not supported",
            header.weights_version
        )));
    }
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(LabError::Checkpoint("truncated tensor data".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut weights = ModelWeights::zeros(&header.config)
        .map_err(|e| LabError::Checkpoint(format!("invalid config in header: {e}")))?;
    let mut expected = Vec::new();
    weights.for_each_tensor(|name, shape, _| expected.push((name, shape)));
    if expected.len() != header.tensors.len() {
        return Err(LabError::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for (dst, ((name, shape), entry)) in weights
        .tensors_mut()
        .into_iter()
        .zip(expected.iter().zip(&header.tensors))
    {
        if *name != entry.name || *shape != entry.shape {
            return Err(LabError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let end = entry.offset + dst.len();
        if end > values.len() {
            return Err(LabError::Checkpoint(format!("tensor {name} runs past end of data")));
        }
        dst.copy_from_slice(&values[entry.offset..end]);
    }
    weights.validate().map_err(|e| LabError::Checkpoint(e.to_string()))?;
    Ok(weights)
}

/// Writes atomically (temp file then rename).
pub fn save_checkpoint(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(weights, &mut buf)?;
    crate::experiment::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let bytes = fs::read(path.as_ref())?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelWeights {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            grid_side: 2,
            vocab_size: 11,
            max_seq_len: 10,
            seed: 5,
        };
        ModelWeights::init(&cfg).unwrap()
    }

    #[test]
    fn roundtrip_preserves_weights_bitwise() {
        let w = small();
        let mut buf = Vec::new();
        write_checkpoint(&w, &mut buf).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn version_mismatch_fails_loudly() {
        let mut buf = Vec::new();
        write_checkpoint(&small(), &mut buf).unwrap();
        buf[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = read_checkpoint(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&small(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(LabError::Checkpoint(_))));
    }

    #[test]
    fn truncated_data_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&small(), &mut buf).unwrap();
        buf.truncate(buf.len() - 16);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
