//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `HGC1`, u32 schema, length-prefixed JSON
//! header (config, metadata, optimizer hyperparameters), then length-prefixed
//! named tensor entries as f32, then the Adam moment entries when present,
//! and a CRC32 trailer over everything after the magic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureNorm, Model, ModelConfig};
use crate::autodiff::{AdamParams, AdamState, AutodiffError, Tensor};
use crate::util::crc32;

const MAGIC: &[u8; 4] = b"HGC1";
const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub fold: u32,
    pub epoch: u32,
    pub best_weighted_f1: f64,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
    pub feature_norm: FeatureNorm,
}

impl ModelCheckpoint {
    pub fn into_model(self) -> Result<Model, AutodiffError> {
        let model = Model {
            config: self.config,
            params: self.params,
            feature_norm: self.feature_norm,
        };
        validate_shapes(&model)?;
        Ok(model)
    }
}

fn validate_shapes(model: &Model) -> Result<(), AutodiffError> {
    let expected = Model::expected_shapes(&model.config);
    for (name, shape) in &expected {
        match model.params.get(name) {
            None => {
                return Err(AutodiffError::Contract(format!(
                    "checkpoint missing parameter {name:?}"
                )))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(AutodiffError::Contract(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if model.params.len() != expected.len() {
        return Err(AutodiffError::Contract(
            "checkpoint carries unexpected extra parameters".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error in {path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    adam: Option<AdamHeader>,
    feature_norm: FeatureNorm,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    hyper: AdamParams,
    t: u64,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for d in tensor.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        config: ckpt.config,
        meta: ckpt.meta.clone(),
        adam: ckpt.adam.as_ref().map(|a| AdamHeader {
            hyper: a.hyper,
            t: a.t,
        }),
        feature_norm: ckpt.feature_norm.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut payload = Vec::new();
    payload.extend_from_slice(&SCHEMA.to_le_bytes());
    payload.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&header_json);
    payload.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.params {
        push_tensor(&mut payload, name, tensor);
    }
    if let Some(adam) = &ckpt.adam {
        payload.extend_from_slice(&(adam.moments.len() as u32).to_le_bytes());
        for (name, (m, v)) in &adam.moments {
            push_tensor(&mut payload, &format!("{name}.m"), m);
            push_tensor(&mut payload, &format!("{name}.v"), v);
        }
    }

    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&payload).map_err(io_err)?;
    file.write_all(&crc32(&payload).to_le_bytes()).map_err(io_err)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    cursor: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.cursor + n > self.bytes.len() {
            return Err(CheckpointError::Format {
                path: self.path.to_path_buf(),
                message: "unexpected end of payload".into(),
            });
        }
        let s = &self.bytes[self.cursor..self.cursor + n];
        self.cursor += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| {
            CheckpointError::Format {
                path: self.path.to_path_buf(),
                message: "tensor name is not UTF-8".into(),
            }
        })?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok((name, Tensor::new(shape, data)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let format_err = |message: String| CheckpointError::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err("bad magic".into()));
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(payload) != stored {
        return Err(format_err("checksum mismatch (truncated or corrupt)".into()));
    }

    let mut r = Reader {
        bytes: payload,
        cursor: 0,
        path,
    };
    let schema = r.u32()?;
    if schema != SCHEMA {
        return Err(format_err(format!("unsupported schema {schema}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| format_err(format!("bad header: {e}")))?;

    let n_params = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let (name, tensor) = r.tensor()?;
        params.insert(name, tensor);
    }

    let adam = match header.adam {
        None => None,
        Some(adam_header) => {
            let n_moments = r.u32()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..n_moments {
                let (m_name, m) = r.tensor()?;
                let (v_name, v) = r.tensor()?;
                let base = m_name.strip_suffix(".m").ok_or_else(|| {
                    format_err(format!("expected .m moment entry, got {m_name:?}"))
                })?;
                if v_name != format!("{base}.v") {
                    return Err(format_err(format!(
                        "moment pair mismatch: {m_name:?} vs {v_name:?}"
                    )));
                }
                moments.insert(base.to_string(), (m, v));
            }
            Some(AdamState {
                hyper: adam_header.hyper,
                t: adam_header.t,
                moments,
            })
        }
    };

    let ckpt = ModelCheckpoint {
        config: header.config,
        params,
        adam,
        meta: header.meta,
        feature_norm: header.feature_norm,
    };
    // Shape validation against the config.
    validate_shapes(&Model {
        config: ckpt.config,
        params: ckpt.params.clone(),
        feature_norm: ckpt.feature_norm.clone(),
    })?;
    Ok(ckpt)
}
