//! Checkpoint files: one JSON metadata line, then named tensor records
//! `{u32 name length, name, u8 dtype, u32 rank, u64 dims…, payload}`, all
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, KittModel, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "kitt-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    kind: ModelKind,
    config: ArchitectureConfig,
    vocab: Vec<String>,
    vocab_hash: String,
    step: u64,
    tensors: usize,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub(crate) fn to_bytes(model: &KittModel) -> Vec<u8> {
    let meta = Meta {
        format: MAGIC.into(),
        version: CHECKPOINT_VERSION,
        kind: model.kind(),
        config: model.config().clone(),
        vocab: model.vocab.names(),
        vocab_hash: model.vocab.hash().to_string(),
        step: model.step,
        tensors: model.params.len(),
    };
    let mut out = serde_json::to_vec(&meta).expect("metadata serialises");
    out.push(b'\n');
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(f32::DTYPE.code());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated tensor record"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<KittModel> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing metadata line"))?;
    let meta: Meta = serde_json::from_slice(&bytes[..nl])?;
    if meta.format != MAGIC {
        return Err(bad(format!("unknown format `{}`", meta.format)));
    }
    if meta.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "version {} (this build reads version {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    let vocab = Vocabulary::from_names(&meta.vocab)?;
    vocab.check_hash(&meta.vocab_hash)?;
    let mut model = KittModel::new(&meta.config, meta.kind, vocab, 0)?;
    model.step = meta.step;
    if meta.tensors != model.params.len() {
        return Err(bad(format!(
            "{} tensors, architecture has {}",
            meta.tensors,
            model.params.len()
        )));
    }
    let mut r = Reader { buf: &bytes[nl + 1..] };
    let mut seen = vec![false; model.params.len()];
    for _ in 0..meta.tensors {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| bad(format!("unknown dtype for `{name}`")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(name)
            .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
        let p = model.params.get_mut(id);
        if p.shape != shape {
            return Err(bad(format!("`{name}` has shape {shape:?}, expected {:?}", p.shape)));
        }
        let payload = r.take(p.value.len() * dtype.size())?;
        p.value = match dtype {
            DType::F32 => payload.chunks_exact(4).map(f32::read_le).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
        };
        seen[id.0] = true;
    }
    if !r.buf.is_empty() {
        return Err(bad("trailing bytes after tensor records"));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.params.iter().nth(i).map(|p| p.name.clone()).unwrap_or_default();
        return Err(bad(format!("missing tensor `{name}`")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &KittModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. With `expected_vocab_hash` set, a model trained on a
/// different vocabulary is rejected.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<KittModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = from_bytes(&bytes)?;
    if let Some(h) = expected_vocab_hash {
        if model.vocab.hash() != h {
            return Err(Error::VocabMismatch {
                expected: h.to_string(),
                found: model.vocab.hash().to_string(),
            });
        }
    }
    Ok(model)
}
