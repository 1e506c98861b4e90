//! Versioned binary model container.
//!
//! ```text
//! 8 bytes   magic "PRNTCKPT"
//! u32 LE    format version (1)
//! u32 LE    header length H
//! H bytes   JSON header: dtype, init seed, layer spec, array lengths,
//!           batch-norm constants, caller metadata
//! ...       every parameter array as little-endian floats, in layer order;
//!           batch-norm layers store gamma, beta, moving mean, moving variance
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BatchNormState, Conv2d, Dense, Layer, Model, ModelSpec, NnError, Real};

const MAGIC: &[u8; 8] = b"PRNTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} parameters, expected {expected}")]
    Dtype { expected: String, found: String },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint arrays do not match the spec: {0}")]
    Shape(#[from] NnError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    seed: u64,
    spec: ModelSpec,
    arrays: Vec<usize>,
    batchnorm: Vec<(f64, f64)>,
    meta: serde_json::Value,
}

fn arrays<T: Real>(model: &Model<T>) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(c) => out.extend([c.weights.as_slice(), c.bias.as_slice()]),
            Layer::Dense(d) => out.extend([d.weights.as_slice(), d.bias.as_slice()]),
            Layer::BatchNorm(bn) => out.extend([
                bn.gamma.as_slice(),
                bn.beta.as_slice(),
                bn.moving_mean.as_slice(),
                bn.moving_variance.as_slice(),
            ]),
            Layer::Dropout { .. } | Layer::Flatten => {}
        }
    }
    out
}

pub fn encode<T: Real>(model: &Model<T>, meta: &serde_json::Value) -> Vec<u8> {
    let arrays = arrays(model);
    let header = Header {
        dtype: T::DTYPE.to_string(),
        seed: model.seed(),
        spec: model.spec().clone(),
        arrays: arrays.iter().map(|a| a.len()).collect(),
        batchnorm: model
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some((bn.epsilon, bn.momentum)),
                _ => None,
            })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for array in arrays {
        for &v in array {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Model<T>, serde_json::Value), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            expected: T::DTYPE.to_string(),
            found: header.dtype,
        });
    }

    let mut cursor = 16 + header_len;
    let mut arrays = header.arrays.iter();
    let mut next = || -> Result<Vec<T>, CheckpointError> {
        let len = *arrays.next().ok_or(CheckpointError::Truncated)?;
        let end = cursor + len * T::BYTES;
        let raw = bytes.get(cursor..end).ok_or(CheckpointError::Truncated)?;
        cursor = end;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    };

    let template = Model::<T>::from_spec(header.spec.clone(), 0)?;
    let mut bn_constants = header.batchnorm.iter();
    let mut layers = Vec::with_capacity(template.layers().len());
    for layer in template.layers() {
        layers.push(match layer {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                spec: c.spec,
                in_channels: c.in_channels,
                weights: next()?,
                bias: next()?,
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                in_features: d.in_features,
                units: d.units,
                activation: d.activation,
                weights: next()?,
                bias: next()?,
            }),
            Layer::BatchNorm(_) => {
                let &(epsilon, momentum) =
                    bn_constants.next().ok_or(CheckpointError::Truncated)?;
                Layer::BatchNorm(BatchNormState {
                    gamma: next()?,
                    beta: next()?,
                    moving_mean: next()?,
                    moving_variance: next()?,
                    epsilon,
                    momentum,
                })
            }
            Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
            Layer::Flatten => Layer::Flatten,
        });
    }
    if cursor != bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let model = Model::from_parts(header.spec, layers, header.seed)?;
    Ok((model, header.meta))
}

pub fn save<T: Real>(
    model: &Model<T>,
    meta: &serde_json::Value,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&encode(model, meta)).map_err(io)?;
    file.sync_all().map_err(io)
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, serde_json::Value), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
