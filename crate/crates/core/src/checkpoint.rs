//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `BMRCKPT\0`                         |
//! | 4     | `u32` format version (currently 1)        |
//! | 8     | `u64` header length `n`                   |
//! | n     | UTF-8 JSON [`Header`]                     |
//! | rest  | `f64` payload, addressed by byte offsets  |
//!
//! The header lists every tensor in registration order: parameters first,
//! then the running mean and variance of each batch-norm layer. Offsets
//! are relative to the start of the payload, and the payload must be
//! exactly as long as the tensors require.

use serde::{Deserialize, Serialize};

use crate::config::{BmrConfig, View};
use crate::error::{BmrError, Result};
use crate::model::Bmr;

pub const MAGIC: &[u8; 8] = b"BMRCKPT\0";
pub const VERSION: u32 = 1;

/// Cap on derived, non-parameter buffers a header may request (pooling
/// matrices, position encodings), in `f64` elements.
const MAX_DERIVED: usize = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: BmrConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

fn layout(model: &Bmr) -> (Vec<TensorEntry>, Vec<&[f64]>) {
    let mut parts: Vec<(&str, TensorKind, Vec<usize>, &[f64])> = Vec::new();
    for e in model.store.entries() {
        parts.push((&e.name, TensorKind::Param, e.value.shape().to_vec(), e.value.data()));
    }
    for (name, s) in model.store.stats() {
        parts.push((name, TensorKind::RunningMean, vec![s.mean.len()], &s.mean));
        parts.push((name, TensorKind::RunningVar, vec![s.var.len()], &s.var));
    }
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(parts.len());
    let mut chunks = Vec::with_capacity(parts.len());
    for (name, kind, shape, data) in parts {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape,
            offset,
        });
        offset += 8 * data.len() as u64;
        chunks.push(data);
    }
    (entries, chunks)
}

pub fn encode(model: &Bmr) -> Result<Vec<u8>> {
    let (tensors, chunks) = layout(model);
    let payload_bytes = chunks.iter().map(|c| 8 * c.len() as u64).sum();
    let header = Header {
        config: model.cfg().clone(),
        tensors,
        payload_bytes,
    };
    let json = serde_json::to_vec(&header).map_err(|e| BmrError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload_bytes as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for c in chunks {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(BmrError::Checkpoint(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses and checks the framing and header without building a model.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut rest = bytes;
    if take(&mut rest, 8, "magic")? != MAGIC {
        return Err(BmrError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(BmrError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| BmrError::Checkpoint("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(take(&mut rest, len, "header")?).map_err(|e| BmrError::Checkpoint(e.to_string()))?;
    if header.payload_bytes != rest.len() as u64 {
        return Err(BmrError::Checkpoint(format!(
            "payload is {} bytes, header declares {}",
            rest.len(),
            header.payload_bytes
        )));
    }
    Ok((header, rest))
}

/// Refuses configs whose model could not possibly match the payload, so a
/// corrupt header cannot trigger a huge allocation.
fn check_scale(cfg: &BmrConfig, payload_floats: usize) -> Result<()> {
    let fail = |what: &str| Err(BmrError::Checkpoint(format!("config {what} does not fit the payload")));
    let d = cfg.d;
    let (gh, gw) = cfg.grid();
    let grid = gh.saturating_mul(gw);
    let experts = 12usize
        .saturating_mul(cfg.n_experts)
        .saturating_mul(d)
        .saturating_mul(d);
    if experts > payload_floats || cfg.f_hidden > payload_floats {
        return fail("width");
    }
    if (cfg.has(View::T) || cfg.has(View::M)) && cfg.vocab.saturating_mul(d) > payload_floats {
        return fail("vocabulary");
    }
    if grid.saturating_add(cfg.max_len).saturating_mul(d) > MAX_DERIVED {
        return fail("sequence length");
    }
    if cfg.has(View::Ip) {
        let conv = cfg
            .image_h
            .saturating_sub(2)
            .saturating_mul(cfg.image_w.saturating_sub(2));
        if conv.saturating_mul(grid) > MAX_DERIVED || grid.saturating_mul(d) > payload_floats {
            return fail("image size");
        }
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Bmr> {
    let (header, payload) = decode_header(bytes)?;
    header.config.validate()?;
    check_scale(&header.config, payload.len() / 8)?;
    let mut model = Bmr::new(&header.config, 0)?;

    let (expected, _) = layout(&model);
    if expected.len() != header.tensors.len() {
        return Err(BmrError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want != got {
            return Err(BmrError::Checkpoint(format!(
                "tensor `{}` ({:?} {:?} at {}) does not match the model's `{}` ({:?} {:?} at {})",
                got.name, got.kind, got.shape, got.offset, want.name, want.kind, want.shape, want.offset
            )));
        }
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut fill = |dst: &mut [f64]| {
        for (d, v) in dst.iter_mut().zip(&mut values) {
            *d = v;
        }
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        fill(model.store.value_mut(id).data_mut());
    }
    for (_, s) in model.store.stats_entries_mut() {
        fill(&mut s.mean);
        fill(&mut s.var);
    }
    Ok(model)
}
