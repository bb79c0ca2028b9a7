//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f64` sections in header order. A probe batch
//! and its forward outputs are stored so that loading can confirm the
//! restored network reproduces them bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use fedl::network::{forward, NetworkConfig, NetworkParams};
use fedl::trainer::{AdamState, TrainConfig};
use fedl::FdParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::hex;

pub const MAGIC: &[u8; 8] = b"FEDLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PROBE_ROWS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net_config: NetworkConfig,
    pub train_config: TrainConfig,
    /// Original label of each class index.
    pub classes: Vec<String>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: NetworkParams,
    pub optimizer: AdamState,
    pub probe_inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: CheckpointMeta,
    adam_step: u64,
    probe_rows: usize,
    sections: Vec<Section>,
    payload_sha256: String,
}

impl Checkpoint {
    /// Takes the probe batch from the first rows of `inputs`.
    pub fn new(meta: CheckpointMeta, params: NetworkParams, optimizer: AdamState, inputs: &[Vec<f64>]) -> Self {
        Self {
            meta,
            params,
            optimizer,
            probe_inputs: inputs.iter().take(PROBE_ROWS).cloned().collect(),
        }
    }
}

fn probe_outputs(ck: &Checkpoint) -> Result<Vec<f64>, CheckpointError> {
    if ck.probe_inputs.is_empty() {
        return Ok(Vec::new());
    }
    let (out, _) = forward(&ck.params, &ck.meta.net_config, &ck.probe_inputs)
        .map_err(|e| CheckpointError::Corrupt(format!("probe forward failed: {e}")))?;
    Ok(out.iter().flat_map(flatten_fd).collect())
}

fn flatten_fd(fd: &FdParams) -> Vec<f64> {
    fd.alpha().iter().chain(fd.p()).copied().chain(std::iter::once(fd.tau())).collect()
}

fn power_values(params: &NetworkParams) -> Vec<f64> {
    params
        .layers()
        .filter_map(|l| l.power.as_ref())
        .flat_map(|pv| pv.u.iter().chain(&pv.v).copied())
        .collect()
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let sections: Vec<(&str, Vec<f64>)> = vec![
        ("params", ck.params.flatten()),
        ("power_vectors", power_values(&ck.params)),
        ("adam_m", ck.optimizer.m.clone()),
        ("adam_v", ck.optimizer.v.clone()),
        ("probe_inputs", ck.probe_inputs.concat()),
        ("probe_outputs", probe_outputs(ck)?),
    ];
    let mut payload = Vec::new();
    for (_, values) in &sections {
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        meta: ck.meta.clone(),
        adam_step: ck.optimizer.step,
        probe_rows: ck.probe_inputs.len(),
        sections: sections
            .iter()
            .map(|(n, v)| Section {
                name: n.to_string(),
                len: v.len(),
            })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&header_bytes).map_err(io)?;
    f.write_all(&payload).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version == 0 || version > FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|e| *e <= bytes.len()).ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(corrupt("header version disagrees with preamble"));
    }
    let payload = &bytes[header_end..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let total: usize = header.sections.iter().map(|s| s.len).sum();
    if payload.len() != total * 8 {
        return Err(corrupt("payload length disagrees with section table"));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut section = |name: &str| -> Result<Vec<f64>, CheckpointError> {
        let s = header
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing section {name}")))?;
        Ok(values.by_ref().take(s.len).collect())
    };
    // sections are read in the order they were written
    let flat = section("params")?;
    let power = section("power_vectors")?;
    let adam_m = section("adam_m")?;
    let adam_v = section("adam_v")?;
    let probe_flat = section("probe_inputs")?;
    let stored_outputs = section("probe_outputs")?;

    let meta = header.meta;
    let mut params = NetworkParams::zeros(&meta.net_config).map_err(|e| CheckpointError::Corrupt(format!("network config: {e}")))?;
    params.assign_flat(&flat).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut power_iter = power.into_iter();
    for layer in params.layers_mut() {
        if let Some(pv) = layer.power.as_mut() {
            for x in pv.u.iter_mut().chain(pv.v.iter_mut()) {
                *x = power_iter.next().ok_or_else(|| corrupt("power vector section too short"))?;
            }
        }
    }
    if power_iter.next().is_some() {
        return Err(corrupt("power vector section too long"));
    }
    if adam_m.len() != adam_v.len() || (!adam_m.is_empty() && adam_m.len() != flat.len()) {
        return Err(corrupt("optimizer state does not match the network"));
    }
    let dim = meta.net_config.input_dim;
    if probe_flat.len() != header.probe_rows * dim {
        return Err(corrupt("probe batch has the wrong shape"));
    }
    let ck = Checkpoint {
        meta,
        params,
        optimizer: AdamState {
            step: header.adam_step,
            m: adam_m,
            v: adam_v,
        },
        probe_inputs: probe_flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect(),
    };
    let replay = probe_outputs(&ck)?;
    let same = replay.len() == stored_outputs.len()
        && replay.iter().zip(&stored_outputs).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(corrupt("restored network does not reproduce the stored probe outputs"));
    }
    Ok(ck)
}
