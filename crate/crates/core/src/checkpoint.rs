//! Binary checkpoints.
//!
//! Layout: magic `TKMASKCK`, u32 format version, u64 header length, JSON
//! header, raw little-endian f64 parameter data in header order, and a
//! sha256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{io_at, Error, Result};
use crate::masking::LexiconConstraints;
use crate::model::{MaskerModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"TKMASKCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    pub constraints: LexiconConstraints,
    pub tensors: Vec<TensorEntry>,
}

/// Unparsed checkpoint contents, for inspection and tooling.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub header: serde_json::Value,
    pub data: Vec<f64>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * self.data.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let rest = &body[PREFIX_LEN..];
        if header_len > rest.len() || !(rest.len() - header_len).is_multiple_of(8) {
            return Err(corrupt("inconsistent header length"));
        }
        let header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let data = rest[header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(RawCheckpoint { version, header, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_at(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// A loaded model and the configuration it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MaskerModel,
    pub train: TrainConfig,
}

pub fn save_checkpoint(model: &MaskerModel, train: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut data = Vec::with_capacity(model.params.num_scalars());
    for (id, name, value) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: value.rows(),
            cols: value.cols(),
            decay: model.params.decays(id),
        });
        data.extend_from_slice(value.data());
    }
    let header = Header {
        model: model.config.clone(),
        train: train.clone(),
        vocab: model.vocab.tokens().to_vec(),
        constraints: model.constraints.clone(),
        tensors,
    };
    RawCheckpoint {
        version: FORMAT_VERSION,
        header: serde_json::to_value(&header)?,
        data,
    }
    .write(path)
}

fn shape_of(header: &Header, name: &str) -> Option<(usize, usize)> {
    header
        .tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| (t.rows, t.cols))
}

/// Encoder dimensions implied by the stored tensor shapes.
fn implied_encoder(header: &Header) -> Result<EncoderConfig> {
    let missing = |n: &str| Error::CorruptCheckpoint(format!("missing tensor `{n}`"));
    let (vocab_size, hidden) = shape_of(header, "encoder.tok_emb").ok_or_else(|| missing("encoder.tok_emb"))?;
    let (max_len, _) = shape_of(header, "encoder.pos_emb").ok_or_else(|| missing("encoder.pos_emb"))?;
    let layers = (0..)
        .take_while(|l| shape_of(header, &format!("encoder.layer{l}.attn.wq")).is_some())
        .count();
    let ff = shape_of(header, "encoder.layer0.ff.w1").map_or(0, |s| s.1);
    Ok(EncoderConfig {
        hidden,
        layers,
        heads: header.model.encoder.heads,
        ff,
        max_len,
        dropout: header.model.encoder.dropout,
        vocab_size,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = RawCheckpoint::read(path)?;
    let header: Header = serde_json::from_value(raw.header)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    header.model.encoder.ensure_matches(&implied_encoder(&header)?)?;
    if header.vocab.len() != header.model.encoder.vocab_size {
        return Err(Error::ConfigMismatch {
            field: "vocab-size",
            expected: header.model.encoder.vocab_size.to_string(),
            found: header.vocab.len().to_string(),
        });
    }
    let expected_scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if expected_scalars != raw.data.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "header lists {expected_scalars} values, file holds {}",
            raw.data.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut offset = 0;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let value = Tensor::from_vec(t.rows, t.cols, raw.data[offset..offset + n].to_vec());
        if params.id(&t.name).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{}`", t.name)));
        }
        params.add(t.name.clone(), value, t.decay);
        offset += n;
    }
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let model = MaskerModel::from_parts(header.model, vocab, header.constraints, params)?;
    Ok(Checkpoint {
        model,
        train: header.train,
    })
}

/// Loads a checkpoint and checks its encoder against `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &EncoderConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    expected.ensure_matches(&ck.model.config.encoder)?;
    Ok(ck)
}
