//! Versioned binary checkpoints.
//!
//! All integers little-endian:
//!
//! ```text
//! magic    4 bytes  "XVLC"
//! version  u32      FORMAT_VERSION
//! hlen     u32      header length
//! header   hlen     UTF-8 JSON {"model": ModelConfig, "anchors": [[w, h], ...], "echo": any}
//! count    u32      number of tensors
//! count × {
//!   nlen   u32      name length
//!   name   nlen     UTF-8
//!   ndim   u32
//!   dims   ndim × u64
//!   data   Π dims × f64
//! }
//! ```
//!
//! Tensors appear in parameter registration order and must match the
//! model rebuilt from the header by name and shape.

use std::path::Path;

use crossloc_core::detection::AnchorSet;
use crossloc_core::model::{Model, ModelConfig};
use crossloc_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XVLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    anchors: Vec<(f64, f64)>,
    #[serde(default)]
    echo: serde_json::Value,
}

pub fn encode(model: &Model, echo: &serde_json::Value) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: model.cfg.clone(),
        anchors: model.anchors.as_slice().to_vec(),
        echo: echo.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + model.store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model stored in `bytes`; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let anchors = AnchorSet::with_count(header.anchors)?;
    let mut model = Model::new(header.model, anchors)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::format(path, format!("tensor {name} has impossible shape {dims:?}")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    model.store.load(entries)?;
    Ok((model, header.echo))
}

pub fn save(path: &Path, model: &Model, echo: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, encode(model, echo)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}
