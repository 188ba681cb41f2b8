//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"ESRCKPT\0" | u32 version | u32 group | u64 len | config JSON
//! u64 tensor count | per tensor: u32 len | name | u32 rank | u64 dims.. | f64 data..
//! u64 FNV-1a of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"ESRCKPT\0";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn checkpoint_to_bytes(m: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&m.store.group().to_le_bytes());
    let cfg = serde_json::to_vec(&m.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(m.store.len() as u64).to_le_bytes());
    for (_, name, t) in m.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("implausible {what} {v}")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing checkpoint magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}, this build reads {VERSION}"
        )));
    }
    if fnv1a(body) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let group = r.u32("group")?;
    let cfg_len = r.len("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let mut m = ModelParams::new(config, group)?;
    let count = r.len("tensor count")?;
    if count != m.store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} tensors stored, config implies {}",
            m.store.len()
        )));
    }
    for id in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?;
        if name != m.store.name(id) {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {id} is `{name}`, expected `{}`",
                m.store.name(id)
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len("dimension")?);
        }
        if dims != m.store.get(id).shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` has shape {dims:?}, expected {:?}",
                m.store.get(id).shape()
            )));
        }
        let data = m.store.get_mut(id).data_mut();
        let raw = r.take(8 * data.len(), name)?;
        for (d, chunk) in data.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(m)
}

pub fn save_checkpoint(m: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(m))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks its architecture against `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams> {
    let m = load_checkpoint(path)?;
    let c = &m.config;
    let fields = [
        ("hidden_size", c.hidden_size, expected.hidden_size),
        ("num_layers", c.num_layers, expected.num_layers),
        ("num_heads", c.num_heads, expected.num_heads),
        ("ffn_size", c.ffn_size, expected.ffn_size),
        ("relative_window", c.relative_window, expected.relative_window),
        ("vocab_size", c.vocab_size, expected.vocab_size),
        ("max_len", c.max_len, expected.max_len),
    ];
    for (name, got, want) in fields {
        if got != want {
            return Err(Error::config(format!(
                "{name} mismatch: checkpoint has {got}, expected {want}"
            )));
        }
    }
    Ok(m)
}
