//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes       | content                                         |
//! |-------------|-------------------------------------------------|
//! | 8           | magic `CRFCKPT\0`                               |
//! | 4           | format version (`u32`, currently 1)             |
//! | 8           | header length `n` (`u64`)                       |
//! | n           | UTF-8 JSON [`CheckpointHeader`]                 |
//! | rest        | tensor data as `f64`, in header order, row-major |
//!
//! Readers reject unknown versions. New header fields must be optional so
//! that older files keep loading.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AdapterConfig, ModelConfig, ModelState, SeedRecord, Stage, TaskHead};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::GeneVocabulary;

pub const MAGIC: &[u8; 8] = b"CRFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub stage: Option<Stage>,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub head: Option<TaskHead>,
    pub seeds: SeedRecord,
    /// Gene vocabulary (without reserved tokens).
    pub genes: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus the gene vocabulary it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub genes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Result<GeneVocabulary> {
        GeneVocabulary::new(self.genes.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let header = CheckpointHeader {
            config: s.config.clone(),
            stage: s.stage,
            adapter: s.adapter.clone(),
            head: s.head.clone(),
            seeds: s.seeds.clone(),
            genes: self.genes.clone(),
            tensors: s
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_owned(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = s.params.iter().map(|(_, _, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in s.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut data = &bytes[20 + hlen..];
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n = e.rows * e.cols;
            if data.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let vals = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            if params.contains(&e.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
            params.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, vals));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if header.config.cell.vocab_size != header.genes.len() + 2 {
            return Err(bad("vocabulary does not match encoder config"));
        }
        let state = ModelState {
            config: header.config,
            stage: header.stage,
            adapter: header.adapter,
            head: header.head,
            seeds: header.seeds,
            params,
        };
        check_layout(&state)?;
        Ok(Self {
            state,
            genes: header.genes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a checkpoint and returns it with the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }
}

/// Parameter names and shapes must match what the configs imply.
fn check_layout(state: &ModelState) -> Result<()> {
    let mut expected = ModelState::init(state.config.clone(), 0)?;
    if let Some(a) = &state.adapter {
        expected = expected.attach_adapters(a.clone(), 0)?;
    }
    if let Some(h) = &state.head {
        expected.attach_head(h.clone(), 0);
    }
    let shapes = |p: &ParamStore| -> Vec<(String, (usize, usize))> {
        let mut v: Vec<_> = p.iter().map(|(_, n, t)| (n.to_owned(), t.shape())).collect();
        v.sort();
        v
    };
    if shapes(&expected.params) != shapes(&state.params) {
        return Err(Error::Checkpoint(
            "parameter layout does not match the stored configuration".into(),
        ));
    }
    Ok(())
}
