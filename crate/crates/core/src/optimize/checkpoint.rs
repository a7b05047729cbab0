//! Versioned checkpoint container.
//!
//! Layout: the magic line `XRFMAE-CKPT`, one line of JSON header, then the
//! tensor payload as little-endian f64 values in manifest order. The header
//! lists each tensor's name, shape, byte offset and SHA-256, plus a digest
//! of the whole payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Task;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParameters};
use crate::optimize::{MetricRow, TrainConfig};
use crate::transform::TransformState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "XRFMAE-CKPT";
const DTYPE: &str = "f64-le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Enough to re-derive every random stream: all randomness is keyed by the
/// seed and the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub task: Option<Task>,
    pub model_config: ModelConfig,
    pub params: ModelParameters,
    pub transform: TransformState,
    pub target_norm: Option<TransformState>,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub metrics: Vec<MetricRow>,
    /// Training record ids actually used (after any subsampling).
    pub train_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    stage: Stage,
    task: Option<Task>,
    model_config: ModelConfig,
    has_decoder: bool,
    has_head: bool,
    transform: TransformState,
    target_norm: Option<TransformState>,
    train_config: TrainConfig,
    epoch: usize,
    rng: RngState,
    metrics: Vec<MetricRow>,
    train_ids: Vec<String>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.count() * 8);
        let mut tensors = Vec::new();
        for (name, m) in self.params.named() {
            let offset = payload.len();
            for v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: [m.rows(), m.cols()],
                offset,
                len: m.len(),
                sha256: digest(&payload[offset..]),
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: DTYPE.into(),
            stage: self.stage,
            task: self.task,
            model_config: self.model_config.clone(),
            has_decoder: self.params.decoder.is_some(),
            has_head: self.params.head.is_some(),
            transform: self.transform.clone(),
            target_norm: self.target_norm.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            metrics: self.metrics.clone(),
            train_ids: self.train_ids.clone(),
            tensors,
            payload_sha256: digest(&payload),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + payload.len() + 2);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .and_then(|r| r.strip_prefix(b"\n"))
            .ok_or_else(|| Error::Checkpoint("not a checkpoint file (bad magic)".into()))?;
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint: header incomplete".into()))?;
        let (json, payload) = (&rest[..nl], &rest[nl + 1..]);
        let raw: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("header lacks format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::Version {
                found: found.min(u64::from(u32::MAX)) as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("unsupported dtype {:?}", header.dtype)));
        }
        header.model_config.validate()?;
        let expected_len: usize = header.tensors.iter().map(|t| t.len * 8).sum();
        if payload.len() < expected_len {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: payload has {} of {expected_len} bytes",
                payload.len()
            )));
        }
        if payload.len() > expected_len {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        if digest(payload) != header.payload_sha256 {
            return Err(Error::Digest("payload checksum mismatch".into()));
        }

        let template = ModelParameters::zeros(&header.model_config, header.has_decoder, header.has_head);
        let names = template.named();
        if names.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                names.len()
            )));
        }
        let mut values = Vec::with_capacity(names.len());
        for ((name, proto), entry) in names.iter().zip(&header.tensors) {
            if *name != entry.name || [proto.rows(), proto.cols()] != entry.shape || proto.len() != entry.len {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {} {:?} does not match expected {name} {:?}",
                    entry.name,
                    entry.shape,
                    proto.shape()
                )));
            }
            let end = entry.offset + entry.len * 8;
            let bytes = payload
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{name} lies outside the payload")))?;
            if digest(bytes) != entry.sha256 {
                return Err(Error::Digest(format!("checksum mismatch in tensor {name}")));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            values.push(crate::tensor::Matrix::from_vec(entry.shape[0], entry.shape[1], data)?);
        }
        let params = template.rebuild(values)?;
        params.check_shapes(&header.model_config)?;
        header.transform.validate()?;
        if let Some(t) = &header.target_norm {
            t.validate()?;
        }
        Ok(Checkpoint {
            stage: header.stage,
            task: header.task,
            model_config: header.model_config,
            params,
            transform: header.transform,
            target_norm: header.target_norm,
            train_config: header.train_config,
            epoch: header.epoch,
            rng: header.rng,
            metrics: header.metrics,
            train_ids: header.train_ids,
        })
    }
}

/// Write atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}
