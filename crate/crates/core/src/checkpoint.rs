//! Named-tensor checkpoints: a JSON header (tensor names, shapes, dtype,
//! free-form metadata) followed by the concatenated float32 payload in
//! little-endian header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    HeaderJson(#[from] serde_json::Error),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("tensor {name}: declared {declared} elements, shape implies {actual}")]
    SizeMismatch { name: String, declared: usize, actual: usize },
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("tensor {0} not found")]
    MissingTensor(String),
}

/// One named weight tensor (row-major f32).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat-addressable set of named tensors; order is the serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape/data mismatch");
        assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<TensorDecl>,
    meta: serde_json::Value,
}

/// Writes `[u32 header length][header JSON][LE f32 payload]`.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let header = Header {
        dtype: "f32".to_string(),
        tensors: params
            .entries
            .iter()
            .map(|e| TensorDecl { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<LittleEndian>(header_bytes.len() as u32)?;
    w.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for e in &params.entries {
        buf.resize(e.data.len() * 4, 0);
        LittleEndian::write_f32_into(&e.data, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; payload sizes must match the declared shapes.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.dtype != "f32" {
        return Err(CheckpointError::UnsupportedDtype(header.dtype));
    }
    let mut params = ParamSet::new();
    let mut buf = Vec::new();
    for decl in &header.tensors {
        if params.get(&decl.name).is_some() {
            return Err(CheckpointError::DuplicateName(decl.name.clone()));
        }
        let len: usize = decl.shape.iter().product();
        buf.resize(len * 4, 0);
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                CheckpointError::SizeMismatch {
                    name: decl.name.clone(),
                    declared: len,
                    actual: 0,
                }
            } else {
                CheckpointError::Io(e)
            }
        })?;
        let mut data = vec![0f32; len];
        LittleEndian::read_f32_into(&buf, &mut data);
        params.entries.push(ParamEntry { name: decl.name.clone(), shape: decl.shape.clone(), data });
    }
    Ok((params, header.meta))
}

// ==== TESTS ====

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("embed.w", &[3, 2], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]);
        p.push("head.b", &[2], vec![1.0, 2.0]);
        p
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample();
        let meta = serde_json::json!({"step": 42, "config": {"hidden_dim": 128}});
        save_checkpoint(&path, &params, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(meta2["step"], 42);
        assert_eq!(meta2["config"]["hidden_dim"], 128);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample(), &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::SizeMismatch { .. }) | Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn num_params_counts_scalars() {
        assert_eq!(sample().num_params(), 8);
    }
}
