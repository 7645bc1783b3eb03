//! Binary checkpoint format.
//!
//! Layout: magic `FETCM\0`, little-endian u32 format version, little-endian
//! u64 JSON header length, the JSON header, then raw little-endian f64
//! arrays in manifest order. The header carries the model configuration,
//! the full vocabulary mapping (raw ids to dense indices; sizes alone could
//! not re-encode held-out logs), the best epoch and its validation
//! log-likelihood, the Adam step counter, and the ordered array manifest.
//! Optimizer moments ride along as `opt.m.<name>` / `opt.v.<name>` entries
//! so training can resume from the snapshot.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clicklog::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

use super::OptimizerState;

const MAGIC: &[u8; 6] = b"FETCM\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    /// Epoch whose validation score selected this snapshot.
    pub epoch: usize,
    pub best_valid_ll: f64,
    pub opt: OptimizerState,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    /// Rebuild a parameter registry carrying this snapshot's values.
    pub fn restore_parameters(&self) -> Result<Parameters> {
        let mut params = Parameters::init(&self.model, &self.vocab, 0)?;
        if self.params.len() != params.len() {
            return Err(Error::Load(format!(
                "checkpoint lists {} parameters, the model wants {}",
                self.params.len(),
                params.len()
            )));
        }
        for arr in &self.params {
            let i = params.index_of(&arr.name).map_err(|_| {
                Error::Load(format!("checkpoint names unknown parameter {}", arr.name))
            })?;
            if params.tensor(i).shape() != &arr.shape[..] {
                return Err(Error::Load(format!(
                    "parameter {} has shape {:?}, checkpoint says {:?}",
                    arr.name,
                    params.tensor(i).shape(),
                    arr.shape
                )));
            }
            params.restore(&arr.name, arr.data.clone())?;
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    epoch: usize,
    best_valid_ll: f64,
    adam_t: u64,
    manifest: Vec<ManifestEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |manifest: &mut Vec<ManifestEntry>, name: String, shape: Vec<usize>, data: &[f64]| {
        manifest.push(ManifestEntry { name, shape, offset: payload.len() as u64 });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for arr in &ckpt.params {
        push(&mut manifest, arr.name.clone(), arr.shape.clone(), &arr.data);
    }
    let (m, v) = ckpt.opt.moments();
    for (arr, mom) in ckpt.params.iter().zip(m) {
        push(&mut manifest, format!("opt.m.{}", arr.name), arr.shape.clone(), mom);
    }
    for (arr, mom) in ckpt.params.iter().zip(v) {
        push(&mut manifest, format!("opt.v.{}", arr.name), arr.shape.clone(), mom);
    }

    let header = Header {
        model: ckpt.model.clone(),
        vocab: ckpt.vocab.clone(),
        epoch: ckpt.epoch,
        best_valid_ll: ckpt.best_valid_ll,
        adam_t: ckpt.opt.t,
        manifest,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Load(format!("could not encode checkpoint header: {}", e)))?;

    let mut bytes = Vec::with_capacity(18 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

fn read_array(payload: &[u8], entry: &ManifestEntry) -> Result<Vec<f64>> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + numel * 8;
    if end > payload.len() {
        return Err(Error::Load(format!(
            "checkpoint truncated: {} wants bytes {}..{} of a {}-byte payload",
            entry.name,
            start,
            end,
            payload.len()
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 18 {
        return Err(Error::Load(format!(
            "{} is {} bytes, shorter than any checkpoint",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::Load(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Load(format!(
            "checkpoint is format version {}, this build reads version {}",
            version, VERSION
        )));
    }
    let header_len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    if 18 + header_len > bytes.len() {
        return Err(Error::Load(format!(
            "checkpoint truncated: header wants {} bytes, file holds {}",
            header_len,
            bytes.len() - 18
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[18..18 + header_len])
        .map_err(|e| Error::Load(format!("bad checkpoint header: {}", e)))?;
    let payload = &bytes[18 + header_len..];

    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for entry in &header.manifest {
        let data = read_array(payload, entry)?;
        if let Some(base) = entry.name.strip_prefix("opt.m.") {
            if params.iter().map(|p: &NamedArray| p.name.as_str()).nth(m.len()) != Some(base) {
                return Err(Error::Load(format!(
                    "optimizer moment {} does not mirror the parameter list",
                    entry.name
                )));
            }
            m.push(data);
        } else if let Some(base) = entry.name.strip_prefix("opt.v.") {
            if params.iter().map(|p: &NamedArray| p.name.as_str()).nth(v.len()) != Some(base) {
                return Err(Error::Load(format!(
                    "optimizer moment {} does not mirror the parameter list",
                    entry.name
                )));
            }
            v.push(data);
        } else {
            params.push(NamedArray {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                data,
            });
        }
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Load(format!(
            "checkpoint holds {} parameters but {}/{} optimizer moment arrays",
            params.len(),
            m.len(),
            v.len()
        )));
    }

    Ok(Checkpoint {
        model: header.model,
        vocab: header.vocab,
        epoch: header.epoch,
        best_valid_ll: header.best_valid_ll,
        opt: OptimizerState::from_arrays(m, v, header.adam_t),
        params,
    })
}
