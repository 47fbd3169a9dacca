//! Self-describing binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, a
//! JSON header (kind, stage, config echo, free-form metadata, tensor
//! directory), then each tensor's values as f64 little-endian in
//! directory order. Weight round-trips are bit-exact.

use crate::autodiff::ParamSet;
use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MQLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    KindMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    stage: Option<String>,
    config: serde_json::Value,
    metadata: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// In-memory checkpoint: typed directory plus raw tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// What the tensors parameterize, e.g. "translator" or "seq2seq".
    pub kind: String,
    /// Training stage tag, e.g. "pretrain" or "finetune".
    pub stage: Option<String>,
    /// Echo of the producing configuration.
    pub config: serde_json::Value,
    /// Free-form extras such as training logs.
    pub metadata: serde_json::Value,
    pub tensors: Vec<(TensorInfo, Array2<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            stage: None,
            config,
            metadata: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, tensor: Array2<f64>) {
        self.tensors.push((
            TensorInfo {
                name: name.to_string(),
                rows: tensor.nrows(),
                cols: tensor.ncols(),
            },
            tensor,
        ));
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(info, _)| info.name == name)
            .map(|(_, t)| t)
    }

    /// Snapshot every parameter of a set, in registration order.
    pub fn push_params(&mut self, params: &ParamSet) {
        for (name, tensor) in params.iter() {
            self.push_tensor(name, tensor.clone());
        }
    }

    /// Restore parameters in place; names and shapes must match exactly.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<(), CheckpointError> {
        if self.tensors.len() != params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} tensors, checkpoint has {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for (pid, (info, tensor)) in self.tensors.iter().enumerate() {
            if info.name != params.name(pid) {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {pid} is {:?}, expected {:?}",
                    info.name,
                    params.name(pid)
                )));
            }
            let slot = params.get_mut(pid);
            if slot.dim() != tensor.dim() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    info.name,
                    tensor.dim(),
                    slot.dim()
                )));
            }
            slot.assign(tensor);
        }
        Ok(())
    }

    pub fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.kind != expected {
            return Err(CheckpointError::KindMismatch {
                expected: expected.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let header = Header {
            kind: self.kind.clone(),
            stage: self.stage.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(info, _)| info.clone()).collect(),
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
        w.write_all(&header_bytes)?;
        let mut buf = Vec::new();
        for (info, tensor) in &self.tensors {
            buf.resize(info.rows * info.cols * 8, 0);
            for (i, v) in tensor.iter().enumerate() {
                LittleEndian::write_f64(&mut buf[i * 8..(i + 1) * 8], *v);
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Corrupt("file shorter than the magic".into()))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| CheckpointError::Corrupt("missing version field".into()))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let header_len = r
            .read_u64::<LittleEndian>()
            .map_err(|_| CheckpointError::Corrupt("missing header length".into()))?;
        let mut header_bytes = vec![0u8; header_len as usize];
        r.read_exact(&mut header_bytes)
            .map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| CheckpointError::Corrupt(format!("bad header json: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|_| {
                CheckpointError::Corrupt(format!("truncated tensor data for {:?}", info.name))
            })?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(LittleEndian::read_f64)
                .collect();
            let tensor = Array2::from_shape_vec((info.rows, info.cols), data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((info, tensor));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint {
            kind: header.kind,
            stage: header.stage,
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
