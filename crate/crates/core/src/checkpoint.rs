//! Versioned checkpoint container.
//!
//! Layout: magic `FASCKPT\0`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then every parameter and batch-norm statistic as
//! little-endian `f64` values in header order. Complex entries are stored as
//! `(re, im)` pairs and covariances as `(V_rr, V_ri, V_ii)` triples.

use std::fs;
use std::path::Path;

use fas_autodiff::{BnMode, C64};
use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::model::{ArchConfig, TwoStageModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FASCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    name: String,
    features: usize,
    momentum: f64,
    eps: f64,
    mode: BnMode,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    n_antennas: usize,
    seed: u64,
    params: Vec<TensorEntry>,
    batch_norm: Vec<BnEntry>,
}

pub fn to_bytes(model: &TwoStageModel) -> Result<Vec<u8>> {
    let header = Header {
        arch: model.arch.clone(),
        n_antennas: model.n_antennas,
        seed: model.seed,
        params: model
            .params
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
        batch_norm: model
            .bn
            .iter()
            .map(|b| BnEntry {
                name: b.name.clone(),
                features: b.mean.len(),
                momentum: b.momentum,
                eps: b.eps,
                mode: b.mode,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for b in &model.bn {
        for m in &b.mean {
            out.extend_from_slice(&m.re.to_le_bytes());
            out.extend_from_slice(&m.im.to_le_bytes());
        }
        for c in &b.cov {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TwoStageModel> {
    let fmt = |m: &str| FasError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FasError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("checkpoint header truncated"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
    let body = &bytes[body_start..];
    if !body.len().is_multiple_of(8) {
        return Err(fmt("checkpoint body is not a whole number of f64 values"));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));

    let mut model = TwoStageModel::new(&header.arch, header.n_antennas, header.seed)?;
    if model.params.len() != header.params.len() || model.bn.len() != header.batch_norm.len() {
        return Err(FasError::Checkpoint(
            "parameter layout differs from the architecture".into(),
        ));
    }
    for (i, entry) in header.params.iter().enumerate() {
        let id = crate::params::ParamId(i);
        let name = &model.params.entries()[i].name;
        if name != &entry.name || model.params.get(id).shape() != entry.shape.as_slice() {
            return Err(FasError::Checkpoint(format!(
                "unexpected tensor `{}` {:?}",
                entry.name, entry.shape
            )));
        }
        for z in model.params.get_mut(id).data_mut() {
            let (re, im) = (values.next(), values.next());
            match (re, im) {
                (Some(re), Some(im)) => *z = C64::new(re, im),
                _ => return Err(fmt("checkpoint body truncated")),
            }
        }
    }
    for (state, entry) in model.bn.iter_mut().zip(&header.batch_norm) {
        if state.name != entry.name || state.mean.len() != entry.features {
            return Err(FasError::Checkpoint(format!(
                "unexpected batch norm `{}`",
                entry.name
            )));
        }
        state.momentum = entry.momentum;
        state.eps = entry.eps;
        state.mode = entry.mode;
        for m in state.mean.iter_mut() {
            match (values.next(), values.next()) {
                (Some(re), Some(im)) => *m = C64::new(re, im),
                _ => return Err(fmt("checkpoint body truncated")),
            }
        }
        for c in state.cov.iter_mut() {
            for v in c.iter_mut() {
                *v = values
                    .next()
                    .ok_or_else(|| fmt("checkpoint body truncated"))?;
            }
        }
    }
    if values.next().is_some() {
        return Err(fmt("trailing values in checkpoint"));
    }
    Ok(model)
}

pub fn save(model: &TwoStageModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TwoStageModel> {
    from_bytes(&fs::read(path)?)
}
