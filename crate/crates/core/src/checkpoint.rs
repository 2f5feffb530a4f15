//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HAHTCKPT"
//! u32 header length, JSON header {"format_version", "config", "variant", "vocab"}
//! u32 parameter count
//! per parameter, in name order:
//!     u32 name length, UTF-8 name, u32 rank (always 2), u64 rows, u64 cols,
//!     rows * cols f64 values
//! ```
//!
//! Writing the same model twice yields identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::error::{HahtError, Result};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::variant::VariantRegistry;

const MAGIC: &[u8; 8] = b"HAHTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    variant: String,
    vocab: Vec<String>,
    vocab_min_count: usize,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        variant: model.variant.name().to_string(),
        vocab: model.vocab.tokens().to_vec(),
        vocab_min_count: model.vocab.min_count(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HahtError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8], registry: &VariantRegistry) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(HahtError::Checkpoint("not a checkpoint file".into()));
    }
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| HahtError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(HahtError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let count = cur.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| HahtError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()?;
        if rank != 2 {
            return Err(HahtError::Checkpoint(format!(
                "parameter {name} has rank {rank}"
            )));
        }
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| HahtError::Checkpoint(format!("parameter {name} is too large")))?;
        let raw = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| HahtError::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params
            .insert(name.clone(), Tensor::from_vec(rows, cols, data))
            .is_some()
        {
            return Err(HahtError::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(HahtError::Checkpoint(
            "trailing bytes after parameters".into(),
        ));
    }
    let vocab = Vocabulary::from_tokens(header.vocab, header.vocab_min_count)?;
    let variant = registry.get(&header.variant)?;
    Model::from_parts(header.config, variant, vocab, ParameterStore::new(params))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, &VariantRegistry::default())
}

/// Errors unless `vocab` is token-for-token the checkpoint's vocabulary.
pub fn check_vocabulary(model: &Model, vocab: &Vocabulary) -> Result<()> {
    if model.vocab.tokens() == vocab.tokens() {
        return Ok(());
    }
    let first = model
        .vocab
        .tokens()
        .iter()
        .zip(vocab.tokens())
        .position(|(a, b)| a != b)
        .unwrap_or(model.vocab.len().min(vocab.len()));
    Err(HahtError::VocabularyMismatch(format!(
        "checkpoint has {} tokens, vocabulary file has {}; first difference at id {first}",
        model.vocab.len(),
        vocab.len()
    )))
}
