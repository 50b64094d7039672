//! Binary checkpoint: `RVQCKPT\0`, u32 version, u64 header length, JSON
//! header, raw little-endian `f32` arrays, SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{StepLog, TrainConfig, TrainState};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::Adam;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RVQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    generator_len: usize,
    discriminator_len: usize,
    opt_generator: AdamHeader,
    opt_discriminator: AdamHeader,
    usage: Vec<u64>,
    history: Vec<StepLog>,
}

fn adam_header(a: &Adam) -> AdamHeader {
    AdamHeader {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        t: a.t,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `state` to `path` through a temporary file and a rename, so a
/// crash never leaves a truncated checkpoint behind.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        generator_len: state.params.generator.len(),
        discriminator_len: state.params.discriminator.len(),
        opt_generator: adam_header(&state.opt_generator),
        opt_discriminator: adam_header(&state.opt_discriminator),
        usage: state.usage.clone(),
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(path, e.to_string()))?;
    let arrays = [
        &state.params.generator,
        &state.params.discriminator,
        &state.opt_generator.m,
        &state.opt_generator.v,
        &state.opt_discriminator.m,
        &state.opt_discriminator.v,
    ];
    let floats: usize = arrays.iter().map(|a| a.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 4 * floats + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for a in arrays {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(bad(path, "file is truncated"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn floats(bytes: &mut &[u8], n: usize, path: &Path) -> Result<Vec<f32>> {
    let raw = take(bytes, 4 * n, path)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Nothing is returned
/// unless the magic, version, checksum and array lengths all check out.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 8 + 4 + 8 + 32 {
        return Err(bad(path, "file is too short to be a checkpoint"));
    }
    if &data[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad(path, "checksum mismatch (file is corrupted)"));
    }
    let mut rest = &body[12..];
    let hlen = u64::from_le_bytes(take(&mut rest, 8, path)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut rest, hlen, path)?).map_err(|e| bad(path, format!("bad header: {e}")))?;
    let (ng, nd) = (header.generator_len, header.discriminator_len);
    let generator = floats(&mut rest, ng, path)?;
    let discriminator = floats(&mut rest, nd, path)?;
    let gm = floats(&mut rest, ng, path)?;
    let gv = floats(&mut rest, ng, path)?;
    let dm = floats(&mut rest, nd, path)?;
    let dv = floats(&mut rest, nd, path)?;
    if !rest.is_empty() {
        return Err(bad(path, "trailing bytes after the parameter arrays"));
    }
    let adam = |h: AdamHeader, m: Vec<f32>, v: Vec<f32>| Adam {
        lr: h.lr,
        beta1: h.beta1,
        beta2: h.beta2,
        eps: h.eps,
        t: h.t,
        m,
        v,
    };
    let model = crate::model::Vqgan::new(header.config.model.clone())?;
    let params = ModelParams {
        generator,
        discriminator,
    };
    model.check_params(&params).map_err(|e| bad(path, e.to_string()))?;
    Ok(TrainState {
        config: header.config,
        step: header.step,
        params,
        opt_generator: adam(header.opt_generator, gm, gv),
        opt_discriminator: adam(header.opt_discriminator, dm, dv),
        usage: header.usage,
        history: header.history,
    })
}

/// [`load_checkpoint`], refusing a checkpoint whose architecture differs
/// from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if &state.config.model != expected {
        return Err(bad(
            path,
            format!(
                "model configuration mismatch: checkpoint has {:?}, expected {:?}",
                state.config.model, expected
            ),
        ));
    }
    Ok(state)
}
