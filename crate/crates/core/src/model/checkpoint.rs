//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "DUODETCK" | version | config_len | config (JSON) | record_count
//! record*: name_len | name | ndim | dims[ndim] | f32 data[numel]
//! ```
//!
//! Names carry their branch tag as prefix (`backbone_rgb.stem.0.conv.weight`).
//! Records are self-contained, so removing the auxiliary heads shrinks the
//! file by exactly the sum of their [`record_size`]s.

use std::fs;
use std::path::Path;

use super::params::{layout, ParamEntry};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DUODETCK";
const VERSION: u32 = 1;

/// Serialized bytes of one parameter record.
pub fn record_size<T: Scalar>(e: &ParamEntry<T>) -> usize {
    4 + e.name.len() + 4 + 4 * e.value.shape().len() + 4 * e.value.shape().iter().product::<usize>()
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let config = serde_json::to_vec(params.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, VERSION as usize);
    put(&mut out, config.len());
    out.extend_from_slice(&config);
    put(&mut out, params.entries().len());
    for e in params.entries() {
        put(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        put(&mut out, e.value.shape().len());
        for &d in e.value.shape() {
            put(&mut out, d);
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|message| Error::Checkpoint { path: path.into(), message })
}

pub(crate) fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> std::result::Result<ModelParams<T>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let truncated = || "truncated file".to_string();
    if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let clen = r.u32().ok_or_else(truncated)?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(clen).ok_or_else(truncated)?).map_err(|e| format!("config: {e}"))?;
    config.validate().map_err(|e| e.to_string())?;
    let specs = layout(&config);
    let count = r.u32().ok_or_else(truncated)?;
    let mut entries = Vec::with_capacity(count);
    let mut cursor = 0;
    for _ in 0..count {
        let nlen = r.u32().ok_or_else(truncated)?;
        let name = std::str::from_utf8(r.take(nlen).ok_or_else(truncated)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let ndim = r.u32().ok_or_else(truncated)?;
        let shape = (0..ndim).map(|_| r.u32().ok_or_else(truncated)).collect::<std::result::Result<Vec<_>, _>>()?;
        // records appear in canonical order, possibly with whole groups omitted
        let Some(offset) = specs[cursor..].iter().position(|s| s.name == name) else {
            return Err(format!("unexpected parameter `{name}`"));
        };
        cursor += offset;
        let spec = &specs[cursor];
        cursor += 1;
        if spec.shape != shape {
            return Err(format!("`{name}` has shape {shape:?}, expected {:?}", spec.shape));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        entries.push(ParamEntry { name, tag: spec.tag, kind: spec.kind, value: Tensor::from_vec(&shape, data).unwrap() });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    // everything outside the auxiliary heads is mandatory
    for spec in specs.iter().filter(|s| !s.tag.is_aux()) {
        if !entries.iter().any(|e| e.name == spec.name) {
            return Err(format!("missing parameter `{}`", spec.name));
        }
    }
    Ok(ModelParams::from_entries(config, entries))
}
