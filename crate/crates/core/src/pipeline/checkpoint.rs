//! Binary checkpoint: `SPOTCKPT`, a version byte, a little-endian `u32`
//! header length, a JSON header, then every tensor as little-endian `f32` in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{EpochRecord, TrainedState};
use crate::error::{Error, Result};
use crate::memory_bank::{InitMode, MemoryBank};
use crate::numerics::{Matrix, TransformerBlockParams};
use crate::representative::{FrozenTheta, FusionParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPOTCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: RunConfig,
    alpha: f64,
    bank_beta: f64,
    bank_init_mode: InitMode,
    bank_renormalize: bool,
    history: Vec<EpochRecord>,
    manifest: Vec<TensorEntry>,
}

fn manifest(state: &TrainedState) -> Vec<(TensorEntry, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, m) in state.params.tensors() {
        out.push((TensorEntry { name, shape: vec![m.rows(), m.cols()] }, m.data().to_vec()));
    }
    for (name, m) in state.theta.0.tensors() {
        out.push((
            TensorEntry { name: format!("theta.{name}"), shape: vec![m.rows(), m.cols()] },
            m.data().to_vec(),
        ));
    }
    let b = &state.bank;
    out.push((
        TensorEntry { name: "bank.prototypes".into(), shape: vec![b.n_classes(), b.k(), b.width()] },
        b.flatten(),
    ));
    out
}

pub fn encode_state(state: &TrainedState) -> Result<Vec<u8>> {
    let tensors = manifest(state);
    let header = Header {
        dtype: "f32".into(),
        config: state.config.clone(),
        alpha: state.params.alpha,
        bank_beta: state.bank.beta,
        bank_init_mode: state.bank.init_mode,
        bank_renormalize: state.bank.renormalize,
        history: state.history.clone(),
        manifest: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, v)| v.len() * 4).sum();
    let mut out = Vec::with_capacity(13 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, values) in &tensors {
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn mismatch(m: impl Into<String>) -> Error {
    Error::HeaderMismatch(m.into())
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainedState> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) { Error::TruncatedFile } else { Error::BadMagic });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 13 {
        return Err(Error::TruncatedFile);
    }
    if bytes[8] != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: bytes[8], expected: CHECKPOINT_VERSION });
    }
    let hlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() < hlen {
        return Err(Error::TruncatedFile);
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| mismatch(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(mismatch(format!("dtype {}", header.dtype)));
    }
    let payload = &body[hlen..];
    let want: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if payload.len() < want {
        return Err(Error::TruncatedFile);
    }
    if payload.len() > want {
        return Err(mismatch(format!("{} trailing payload bytes", payload.len() - want)));
    }

    let cfg = header.config;
    cfg.validate()?;
    let mut params =
        FusionParams::zeros(cfg.width, cfg.heads, cfg.ffn_width(), cfg.shared_irm, header.alpha)?;
    let mut theta = TransformerBlockParams::zeros(cfg.width, cfg.heads, cfg.ffn_width())?;
    let mut expected: Vec<TensorEntry> = params
        .tensors()
        .into_iter()
        .map(|(name, m)| TensorEntry { name, shape: vec![m.rows(), m.cols()] })
        .collect();
    expected.extend(
        theta
            .tensors()
            .into_iter()
            .map(|(name, m)| TensorEntry { name: format!("theta.{name}"), shape: vec![m.rows(), m.cols()] }),
    );
    let bank_entry = header.manifest.last().ok_or_else(|| mismatch("empty manifest"))?;
    if bank_entry.name != "bank.prototypes" || bank_entry.shape.len() != 3 {
        return Err(mismatch("last tensor must be bank.prototypes [C, K, d]"));
    }
    let (c, k, d) = (bank_entry.shape[0], bank_entry.shape[1], bank_entry.shape[2]);
    if k != cfg.n_proto || d != cfg.width {
        return Err(mismatch(format!("bank shape {:?} vs config", bank_entry.shape)));
    }
    expected.push(bank_entry.clone());
    if expected != header.manifest {
        return Err(mismatch("tensor manifest does not match the config"));
    }

    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    let mut fill = |m: &mut Matrix| {
        for v in m.data_mut() {
            *v = values.next().unwrap();
        }
    };
    for (_, m) in params.tensors_mut() {
        fill(m);
    }
    for (_, m) in theta.tensors_mut() {
        fill(m);
    }
    let mut protos = Vec::with_capacity(c);
    for _ in 0..c {
        let mut m = Matrix::zeros(k, d);
        fill(&mut m);
        protos.push(m);
    }
    let mut bank = MemoryBank::from_prototypes(protos, header.bank_beta, header.bank_init_mode)?;
    bank.renormalize = header.bank_renormalize;
    Ok(TrainedState { config: cfg, params, theta: FrozenTheta(theta), bank, history: header.history })
}

pub fn save_state(state: &TrainedState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_state(state)?)?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainedState> {
    decode_state(&std::fs::read(path)?)
}
