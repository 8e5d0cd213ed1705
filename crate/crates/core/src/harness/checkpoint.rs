//! Binary checkpoints: `FGMC`, version, embedded config text, a manifest of
//! `(name, shape, kind, frozen)` entries, the f64 payloads in manifest order
//! and a trailing CRC-32 over everything before it.

use std::fs;
use std::path::Path;

use crate::data::{check_crc, check_magic, Reader};
use crate::error::{Error, Result};
use crate::params::ParamKind;

use super::config::ExperimentConfig;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGMC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Entry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    frozen: bool,
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.cfg.to_text();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(match p.kind {
            ParamKind::Weight => 0,
            ParamKind::Buffer => 1,
        });
        buf.push(u8::from(p.frozen()));
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

struct Decoded {
    config: String,
    entries: Vec<Entry>,
    payloads: Vec<Vec<f64>>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    check_magic(bytes, CHECKPOINT_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("config_length")? as usize;
    let config = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::format("config", "not valid UTF-8"))?
        .to_string();
    let count = r.u32("manifest_count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let field = |f: &str| format!("manifest[{k}].{f}");
        let nl = r.u32(&field("name_length"))? as usize;
        let name = std::str::from_utf8(r.take(nl, &field("name"))?)
            .map_err(|_| Error::format(field("name"), "not valid UTF-8"))?
            .to_string();
        let flags = r.take(2, &field("flags"))?;
        let kind = match flags[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Buffer,
            other => return Err(Error::format(field("kind"), format!("unknown kind {other}"))),
        };
        let rank = r.u32(&field("rank"))? as usize;
        if rank > 8 {
            return Err(Error::format(field("rank"), format!("rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| r.u32(&field("shape")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push(Entry {
            name,
            shape,
            kind,
            frozen: flags[1] != 0,
        });
    }
    let mut payloads = Vec::with_capacity(entries.len());
    for e in &entries {
        let n = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(format!("payload[{}]", e.name), "size overflow"))?;
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::format(format!("payload[{}]", e.name), "truncated"));
        }
        payloads.push(r.f64s(n, &format!("payload[{}]", e.name))?);
    }
    check_crc(bytes, r.pos())?;
    Ok(Decoded {
        config,
        entries,
        payloads,
    })
}

/// Overwrite `model`'s parameters, buffers and freeze flags from a
/// checkpoint whose manifest must match the model exactly.
pub fn load_into(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let d = decode(bytes)?;
    if d.entries.len() != model.store.len() {
        return Err(Error::Manifest(format!(
            "checkpoint holds {} tensors, model has {}",
            d.entries.len(),
            model.store.len()
        )));
    }
    for ((id, p), e) in model.store.iter().zip(&d.entries) {
        let _ = id;
        if p.name != e.name || p.value.shape() != e.shape.as_slice() || p.kind != e.kind {
            return Err(Error::Manifest(format!(
                "entry `{}` {:?} does not match model entry `{}` {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for ((id, e), data) in ids.into_iter().zip(d.entries).zip(d.payloads) {
        let p = model.store.get_mut(id);
        p.value = crate::tensor::Tensor::new(&e.shape, data)?;
        p.grad = None;
        p.velocity = None;
        model.store.set_frozen(id, e.frozen);
    }
    Ok(())
}

/// Rebuild the model from the embedded config, then load its tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let d = decode(bytes)?;
    let cfg = ExperimentConfig::parse(&d.config)?;
    let mut model = Model::build(&cfg)?;
    load_into(&mut model, bytes)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
