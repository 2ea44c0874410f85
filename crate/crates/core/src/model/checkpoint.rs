//! Binary checkpoint format, little-endian throughout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `MPCK` |
//! | 4 | format version (u32), currently 1 |
//! | 8 | header length `H` (u64) |
//! | H | UTF-8 JSON header: encoder config, vocabulary, tensor names and shapes, optimizer step, training step, fingerprint, free-form `meta` |
//! | … | every parameter tensor's data as f64, in header order |
//! | … | if the header says `moments: true`: all first moments, then all second moments, same order |
//!
//! Values are stored bit-for-bit, so save → load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::params::{EncoderParams, TensorInfo};
use crate::autodiff::Tensor;
use crate::corpus::Vocabulary;
use crate::error::{MpcError, Result};
use crate::seed::fnv1a;

pub const MAGIC: &[u8; 4] = b"MPCK";
pub const FORMAT_VERSION: u32 = 1;

/// Adam state: step count and per-tensor moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMoments {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerMoments {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerMoments {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub vocab: Vocabulary,
    pub moments: Option<OptimizerMoments>,
    pub step: u64,
    /// Training configuration and provenance; part of the fingerprint.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorInfo>,
    moments: bool,
    adam_t: u64,
    step: u64,
    fingerprint: u64,
    meta: serde_json::Value,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(MpcError::Checkpoint(format!("truncated: wanted {n} more bytes, {} left", bytes.len())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_tensor(bytes: &mut &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let raw = take(bytes, n * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(params: EncoderParams, vocab: Vocabulary) -> Self {
        Checkpoint {
            params,
            vocab,
            moments: None,
            step: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    /// Hash of the encoder config and `meta`.
    pub fn fingerprint(&self) -> u64 {
        let enc = serde_json::to_string(&self.params.config).expect("config serializes");
        let meta = serde_json::to_string(&self.meta).expect("meta serializes");
        fnv1a(&format!("{enc}\u{0}{meta}"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            encoder: self.params.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self.params.infos(),
            moments: self.moments.is_some(),
            adam_t: self.moments.as_ref().map_or(0, |m| m.t),
            step: self.step,
            fingerprint: self.fingerprint(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            write_tensor(&mut out, t);
        }
        if let Some(m) = &self.moments {
            for t in m.m.iter().chain(&m.v) {
                write_tensor(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        if take(b, 4)? != MAGIC {
            return Err(MpcError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(MpcError::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(take(b, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(b, hlen)?)?;
        let mut named = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            named.push((info.name.clone(), read_tensor(b, &info.shape)?));
        }
        let params = EncoderParams::from_tensors(&header.encoder, named)?;
        let moments = if header.moments {
            let mut m = Vec::with_capacity(header.tensors.len());
            let mut v = Vec::with_capacity(header.tensors.len());
            for info in &header.tensors {
                m.push(read_tensor(b, &info.shape)?);
            }
            for info in &header.tensors {
                v.push(read_tensor(b, &info.shape)?);
            }
            Some(OptimizerMoments { t: header.adam_t, m, v })
        } else {
            None
        };
        if !b.is_empty() {
            return Err(MpcError::Checkpoint(format!("{} trailing bytes", b.len())));
        }
        if params.config.vocab_size != header.vocab.len() {
            return Err(MpcError::Checkpoint(format!(
                "vocabulary has {} entries, encoder expects {}",
                header.vocab.len(),
                params.config.vocab_size
            )));
        }
        let ck = Checkpoint {
            params,
            vocab: header.vocab,
            moments,
            step: header.step,
            meta: header.meta,
        };
        if ck.fingerprint() != header.fingerprint {
            return Err(MpcError::Checkpoint("fingerprint does not match the stored configuration".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| MpcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MpcError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
