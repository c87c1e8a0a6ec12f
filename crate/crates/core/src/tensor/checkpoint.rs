//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "CSNKCKPT"
//! version  u32
//! hdr_len  u64
//! header   hdr_len bytes of JSON (dtype, tensor index, optimizer scalars, metadata)
//! payload  tensor values, then Adam first moments, then second moments
//! crc32    u32 over header + payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSNKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<Entry>,
    adam_step_count: u64,
    adam: AdamConfig,
    payload_len: u64,
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Everything a checkpoint file holds.
#[derive(Debug)]
pub struct Checkpoint<T: Real> {
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    /// Free-form JSON: the model config, epoch counter and the like.
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &ParamStore<T>,
    adam: &AdamState<T>,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let t = params.tensor(id);
        tensors.push(Entry { name: params.name(id).to_string(), shape: t.shape().to_vec(), trainable: params.is_trainable(id) });
        t.data().iter().for_each(|v| v.write_le(&mut payload));
    }
    for moment in adam.first_moment.iter().chain(&adam.second_moment) {
        moment.iter().for_each(|v| v.write_le(&mut payload));
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        tensors,
        adam_step_count: adam.step_count,
        adam: adam.config,
        payload_len: payload.len() as u64,
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let mut crc = crc32fast::Hasher::new();
    crc.update(&header);
    crc.update(&payload);
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    // Write-then-rename so an interrupted save never leaves a partial file under `path`.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if rest.len() < hdr_len + 4 {
        return Err(fail(format!("truncated: header claims {hdr_len} bytes, {} remain", rest.len())));
    }
    let header_bytes = &rest[..hdr_len];
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| fail(format!("bad header: {e}")))?;
    let payload_len = header.payload_len as usize;
    if rest.len() != hdr_len + payload_len + 4 {
        return Err(fail(format!(
            "truncated or padded: expected {} bytes after the preamble, found {}",
            hdr_len + payload_len + 4,
            rest.len()
        )));
    }
    let payload = &rest[hdr_len..hdr_len + payload_len];
    let stored_crc = u32::from_le_bytes(rest[hdr_len + payload_len..].try_into().unwrap());
    let mut crc = crc32fast::Hasher::new();
    crc.update(header_bytes);
    crc.update(payload);
    if crc.finalize() != stored_crc {
        return Err(fail("checksum mismatch".into()));
    }
    if header.dtype != T::DTYPE {
        return Err(fail(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
    }
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload_len != 3 * total * T::BYTES {
        return Err(fail("payload size does not match the tensor index".into()));
    }
    let mut cursor = 0usize;
    let mut read = |count: usize| -> Vec<T> {
        let v = payload[cursor..cursor + count * T::BYTES].chunks_exact(T::BYTES).map(T::read_le).collect();
        cursor += count * T::BYTES;
        v
    };
    let mut params = ParamStore::new();
    for e in &header.tensors {
        let n = e.shape.iter().product();
        let t = Tensor::new(e.shape.clone(), read(n)).map_err(|err| fail(err.to_string()))?;
        params.add(e.name.clone(), t, e.trainable).map_err(|err| fail(err.to_string()))?;
    }
    let sizes: Vec<usize> = header.tensors.iter().map(|e| e.shape.iter().product()).collect();
    let first_moment = sizes.iter().map(|&n| read(n)).collect();
    let second_moment = sizes.iter().map(|&n| read(n)).collect();
    let adam = AdamState { step_count: header.adam_step_count, config: header.adam, first_moment, second_moment };
    Ok(Checkpoint { params, adam, metadata: header.metadata })
}
