//! Binary checkpoint: magic, version, a JSON header, then raw little-endian
//! tensors (parameters, first moments, second moments) in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::ledger::RunLedger;
use super::optim::AdamW;
use crate::encoders::{DualEncoder, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Scalar};

const MAGIC: &[u8; 8] = b"FLXMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub classes: Vec<String>,
    pub captions: Vec<String>,
    /// Optimizer steps completed; batch order is a pure function of
    /// `(config.seed, epoch)`, so this is the whole sampler state.
    pub step: u64,
    pub total_steps: u64,
    pub adam_t: u64,
    pub tensors: Vec<TensorInfo>,
    pub ledger: RunLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub header: CheckpointHeader,
    pub params: ParamSet<F>,
    pub optimizer: AdamW<F>,
}

fn write_tensors<F: Scalar>(set: &ParamSet<F>, out: &mut Vec<u8>) {
    for e in set.entries() {
        for &v in e.value.as_standard_layout().iter() {
            v.write_le(out);
        }
    }
}

fn read_tensors<F: Scalar>(infos: &[TensorInfo], data: &mut &[u8]) -> Result<ParamSet<F>> {
    let mut set = ParamSet::new();
    for info in infos {
        let n = info.rows * info.cols;
        let bytes = n * F::BYTES;
        if data.len() < bytes {
            return Err(Error::validation(format!("checkpoint truncated in tensor {}", info.name)));
        }
        let (head, rest) = data.split_at(bytes);
        let values: Vec<F> = head.chunks_exact(F::BYTES).map(F::read_le).collect();
        let value = Array2::from_shape_vec((info.rows, info.cols), values).expect("sized above");
        let id = set.add(info.name.clone(), value, info.decay);
        set.set_trainable(id, info.trainable);
        *data = rest;
    }
    Ok(set)
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 3 * self.params.numel() * F::BYTES + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        write_tensors(&self.params, &mut out);
        write_tensors(&self.optimizer.m, &mut out);
        write_tensors(&self.optimizer.v, &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::validation(format!("invalid checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("header truncated"));
        }
        let mut header: CheckpointHeader =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(&e.to_string()))?;
        if header.dtype != F::DTYPE {
            return Err(bad(&format!("holds {} tensors, expected {}", header.dtype, F::DTYPE)));
        }
        header.tokenizer = header.tokenizer.clone().reindexed();
        let mut data = &body[len..];
        let params = read_tensors(&header.tensors, &mut data)?;
        let m = read_tensors(&header.tensors, &mut data)?;
        let v = read_tensors(&header.tensors, &mut data)?;
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let optimizer = AdamW {
            m,
            v,
            t: header.adam_t,
            weight_decay: header.config.weight_decay,
        };
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    /// Atomic write via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The trained model, ready for inference.
    pub fn model(&self) -> Result<DualEncoder<F>> {
        DualEncoder::from_parts(
            self.header.config.encoder.clone(),
            self.header.tokenizer.clone(),
            self.params.clone(),
        )
    }
}

pub(crate) fn tensor_infos<F: Scalar>(set: &ParamSet<F>) -> Vec<TensorInfo> {
    set.entries()
        .iter()
        .map(|e| TensorInfo {
            name: e.name.clone(),
            rows: e.value.nrows(),
            cols: e.value.ncols(),
            decay: e.decay,
            trainable: e.trainable,
        })
        .collect()
}
