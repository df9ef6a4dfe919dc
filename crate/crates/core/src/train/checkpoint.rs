//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DAVAMCKPT"  u32 version  u32 kind tag  u32 flags
//! u64 len + config text      (key = value lines)
//! u64 len + dims JSON
//! u64 len + vocabulary text
//! u32 count, then per tensor: u16 len + name, u8 dtype (0 = f32), u32 rows, u32 cols
//! f32 payloads in manifest order, row-major
//! u64 FNV-1a checksum of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::corpus::Vocab;
use crate::models::{Model, ModelDims, ModelKind};
use crate::params::{Fnv, ParamStore};
use crate::quantizer::CodeBook;

pub const MAGIC: &[u8; 9] = b"DAVAMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const FLAG_PRIOR: u32 = 1;

pub const BOOK_CODES: &str = "book.codes";
pub const BOOK_COUNTS: &str = "book.ema_counts";
pub const BOOK_SUMS: &str = "book.ema_sums";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
}

/// A trained model with the vocabulary and configuration it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Fails unless the model has the `expected` kind.
    pub fn expect_kind(&self, expected: ModelKind) -> Result<(), CheckpointError> {
        if self.model.kind != expected {
            return Err(CheckpointError::KindMismatch {
                expected,
                found: self.model.kind,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&m.kind.tag().to_le_bytes());
        let flags = if m.prior_trained { FLAG_PRIOR } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for section in [
            self.config.to_text(),
            serde_json::to_string(&m.dims).expect("dims serialize"),
            self.vocab.to_text(),
        ] {
            out.extend_from_slice(&(section.len() as u64).to_le_bytes());
            out.extend_from_slice(section.as_bytes());
        }
        let tensors = named_tensors(m);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut h = Fnv::new();
        h.bytes(&out);
        out.extend_from_slice(&h.0.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic bytes".into()));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        let mut h = Fnv::new();
        h.bytes(body);
        if h.0 != stored {
            return Err(CheckpointError::Corrupt("checksum mismatch (truncated or damaged file)".into()));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let tag = r.u32()?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("unknown model tag {tag}")))?;
        let flags = r.u32()?;
        let config_text = r.section()?;
        let dims_text = r.section()?;
        let vocab_text = r.section()?;
        let config = TrainConfig::from_text(&config_text).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        let dims: ModelDims =
            serde_json::from_str(&dims_text).map_err(|e| CheckpointError::Corrupt(format!("dims: {e}")))?;
        let vocab = Vocab::from_text(&vocab_text).map_err(|e| CheckpointError::Corrupt(format!("vocab: {e}")))?;

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Corrupt(format!("unknown dtype tag {dtype}")));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            manifest.push((name, rows, cols));
        }
        let mut tensors = std::collections::BTreeMap::new();
        for (name, rows, cols) in manifest {
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(rows, cols, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes after payload".into()));
        }

        // the expected tensor set is whatever a fresh model of this shape registers
        let template = Model::<f32>::new(kind, dims, 0);
        let mut params = ParamStore::new();
        for (name, t) in template.params.iter() {
            let loaded = tensors
                .remove(name.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if loaded.shape() != t.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "{name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            params.insert(name.clone(), loaded).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        let codebook = match &template.codebook {
            None => None,
            Some(b) => {
                let mut take = |n: &str| tensors.remove(n).ok_or_else(|| CheckpointError::MissingTensor(n.to_string()));
                let codes = take(BOOK_CODES)?;
                let counts = take(BOOK_COUNTS)?;
                let sums = take(BOOK_SUMS)?;
                if codes.shape() != b.codes.shape() || sums.shape() != b.codes.shape() || counts.len() != b.size() {
                    return Err(CheckpointError::Corrupt("code book shape mismatch".into()));
                }
                Some(CodeBook {
                    codes,
                    ema_counts: counts.into_data(),
                    ema_sums: sums,
                    decay: config.ema_decay as f32,
                    eps: b.eps,
                })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::Corrupt(format!("unexpected tensor {extra:?}")));
        }
        Ok(Checkpoint {
            model: Model {
                kind,
                dims,
                params,
                codebook,
                prior_trained: flags & FLAG_PRIOR != 0,
            },
            vocab,
            config,
        })
    }

    /// Writes atomically through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn named_tensors(m: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = m.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    if let Some(b) = &m.codebook {
        out.push((BOOK_CODES.into(), b.codes.clone()));
        out.push((BOOK_COUNTS.into(), Tensor::row(b.ema_counts.clone())));
        out.push((BOOK_SUMS.into(), b.ema_sums.clone()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self) -> Result<String, CheckpointError> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| CheckpointError::Corrupt("section too large".into()))?;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Corrupt("section is not UTF-8".into()))
    }
}
