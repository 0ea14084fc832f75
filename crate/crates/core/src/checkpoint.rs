//! Checkpoints: a JSON manifest plus a raw little-endian f32 payload.
//!
//! `ckpt-000500.json` names every tensor with its shape and offset into
//! `ckpt-000500.bin` and carries the SHA-256 of the payload, the run config
//! and the optimizer's moment buffers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub t: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub payload_len: usize,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub model: Model,
    pub adam: Option<Adam>,
    pub path: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}")
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn push_all(payload: &mut Vec<f32>, names: &[String], ts: &[Tensor]) -> Vec<TensorEntry> {
    names
        .iter()
        .zip(ts)
        .map(|(n, t)| {
            let e = TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            };
            payload.extend_from_slice(t.data());
            e
        })
        .collect()
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest
/// path.
pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    step: u64,
    config: &RunConfig,
    model: &Model,
    adam: Option<&Adam>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor> = model.params.iter().map(|(_, _, t)| t.clone()).collect();
    let mut payload = Vec::new();
    let entries = push_all(&mut payload, &names, &tensors);
    let optimizer = adam.map(|a| OptimizerEntry {
        t: a.t,
        m: push_all(&mut payload, &names, &a.m),
        v: push_all(&mut payload, &names, &a.v),
    });
    let bytes: Vec<u8> = payload.iter().flat_map(|x| x.to_le_bytes()).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        model: model.cfg.clone(),
        src_vocab_size: model.cfg.src_vocab,
        tgt_vocab_size: model.cfg.tgt_vocab,
        tensors: entries,
        optimizer,
        payload_len: payload.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let path = dir.join(format!("{name}.json"));
    let bin = payload_path(&path);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::checkpoint(path, format!("bad manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("format version {} (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    Ok(m)
}

fn slice(path: &Path, payload: &[f32], e: &TensorEntry) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let data = payload
        .get(e.offset..e.offset + n)
        .ok_or_else(|| Error::checkpoint(path, format!("{} runs past the payload", e.name)))?;
    Tensor::new(e.shape.clone(), data.to_vec())
        .map_err(|err| Error::checkpoint(path, err.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let m = read_manifest(path)?;
    let bin = payload_path(path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&bytes)) != m.sha256 {
        return Err(Error::checkpoint(path, "payload checksum mismatch"));
    }
    if bytes.len() != m.payload_len * 4 {
        return Err(Error::checkpoint(path, "payload length mismatch"));
    }
    let payload: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    m.model
        .validate()
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let mut params = ParamStore::new();
    for e in &m.tensors {
        params.insert(e.name.clone(), slice(path, &payload, e)?)?;
    }
    let adam = match &m.optimizer {
        Some(o) => {
            let mut a = Adam::new(&params);
            a.t = o.t;
            a.m = o.m.iter().map(|e| slice(path, &payload, e)).collect::<Result<_>>()?;
            a.v = o.v.iter().map(|e| slice(path, &payload, e)).collect::<Result<_>>()?;
            Some(a)
        }
        None => None,
    };
    Ok(Checkpoint {
        step: m.step,
        config: m.config,
        model: Model {
            cfg: m.model,
            params,
        },
        adam,
        path: path.to_path_buf(),
    })
}

/// Copies a checkpoint's two files under a new name in the same directory.
pub fn copy_checkpoint(manifest: &Path, name: &str) -> Result<PathBuf> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let to = dir.join(format!("{name}.json"));
    fs::copy(manifest, &to).map_err(|e| Error::io(&to, e))?;
    let (from_bin, to_bin) = (payload_path(manifest), payload_path(&to));
    fs::copy(&from_bin, &to_bin).map_err(|e| Error::io(&to_bin, e))?;
    Ok(to)
}
