//! Named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                   |
//! |------------|-------------------------------------------|
//! | 0..4       | magic `OTCK`                              |
//! | 4..8       | format version (`u32`, currently 1)       |
//! | 8..16      | header length `n` in bytes (`u64`)        |
//! | 16..16+n   | UTF-8 JSON header                         |
//! | 16+n..     | payload of `f64` values                   |
//!
//! The header records the network spec and training position alongside
//! each tensor's shape and payload offset (in values). A free-form `meta`
//! object rides along with it. Values are stored bit-exactly, so a round trip is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imageio::write_atomic;
use crate::nets::{ModelState, NamedTensor, NetSpec, ParamBundle, SpectralState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters plus optimizer tensors and trainer metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub step: u64,
    /// Additional named tensors (e.g. optimizer moments).
    pub extra: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct SpectralEntry {
    weight: usize,
    u: Entry,
    v: Entry,
}

#[derive(Serialize, Deserialize)]
struct BundleEntry {
    name: String,
    tensors: Vec<Entry>,
    spectral: Vec<SpectralEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetSpec,
    seed: u64,
    step: u64,
    bundles: Vec<BundleEntry>,
    extra: Vec<Entry>,
    meta: serde_json::Value,
    total_values: usize,
}

struct Writer {
    payload: Vec<f64>,
}

impl Writer {
    fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Entry {
        let offset = self.payload.len();
        self.payload.extend_from_slice(data);
        Entry { name: name.into(), shape: shape.to_vec(), offset }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer { payload: Vec::new() };
    let bundles = ck
        .state
        .bundles
        .iter()
        .map(|b| BundleEntry {
            name: b.name.clone(),
            tensors: b.tensors.iter().map(|t| w.push(&t.name, &t.tensor.shape, &t.tensor.data)).collect(),
            spectral: b
                .spectral
                .iter()
                .map(|s| SpectralEntry {
                    weight: s.weight,
                    u: w.push("u", &[s.u.len()], &s.u),
                    v: w.push("v", &[s.v.len()], &s.v),
                })
                .collect(),
        })
        .collect();
    let extra = ck.extra.iter().map(|t| w.push(&t.name, &t.tensor.shape, &t.tensor.data)).collect();
    let header = Header {
        spec: ck.state.spec.clone(),
        seed: ck.state.seed,
        step: ck.step,
        bundles,
        extra,
        meta: ck.meta.clone(),
        total_values: w.payload.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * w.payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &w.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    ensure_format(bytes.len() >= 16, "checkpoint shorter than its preamble")?;
    ensure_format(&bytes[0..4] == CHECKPOINT_MAGIC, "not a checkpoint (bad magic)")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    ensure_format(bytes.len() >= 16 + hlen, "checkpoint header truncated")?;
    let header: Header =
        serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let body = &bytes[16 + hlen..];
    ensure_format(body.len() == header.total_values * 8, "checkpoint payload size mismatch")?;
    let payload: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let read = |e: &Entry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        ensure_format(e.offset + n <= payload.len(), "checkpoint tensor out of range")?;
        Ok(Tensor::from_vec(&e.shape, payload[e.offset..e.offset + n].to_vec()))
    };
    let mut bundles = Vec::new();
    for b in &header.bundles {
        let tensors = b
            .tensors
            .iter()
            .map(|e| Ok(NamedTensor { name: e.name.clone(), tensor: read(e)? }))
            .collect::<Result<Vec<_>>>()?;
        let spectral = b
            .spectral
            .iter()
            .map(|s| {
                ensure_format(s.weight < tensors.len(), "spectral entry refers to a missing weight")?;
                Ok(SpectralState { weight: s.weight, u: read(&s.u)?.data, v: read(&s.v)?.data })
            })
            .collect::<Result<Vec<_>>>()?;
        bundles.push(ParamBundle { name: b.name.clone(), tensors, spectral });
    }
    let extra = header
        .extra
        .iter()
        .map(|e| Ok(NamedTensor { name: e.name.clone(), tensor: read(e)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        state: ModelState { spec: header.spec, seed: header.seed, bundles },
        step: header.step,
        extra,
        meta: header.meta,
    })
}

fn ensure_format(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(msg.into()))
    }
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_checkpoint(&bytes)
}

/// Checks that a checkpoint's parameter shapes match `spec`.
pub fn check_compatible(ck: &Checkpoint, spec: &NetSpec) -> Result<()> {
    let fresh = crate::nets::init_state(spec, 0)?;
    ensure(ck.state.shapes() == fresh.shapes(), || "checkpoint parameters do not match the network spec".into())
}
