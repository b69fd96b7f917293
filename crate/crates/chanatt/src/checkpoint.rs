//! Binary checkpoint container.
//!
//! ```text
//! offset  size     field
//! 0       8        magic b"CHANATT\0"
//! 8       4        format version, u32 LE (currently 1)
//! 12      4        header length H, u32 LE
//! 16      H        header, UTF-8 JSON: model config echo and seed
//! ..      4        entry count, u32 LE
//!         per entry:
//!         1          kind: 0 parameter, 1 buffer
//!         2          name length, u16 LE
//!         n          name, UTF-8
//!         1          rank r
//!         4 r        dims, u32 LE each
//!         8 prod     values, f64 LE, row-major
//! end-32  32       SHA-256 of every preceding byte
//! ```
//!
//! Entries are written in graph order, parameters first. Loading rebuilds
//! the graph from the header and requires every name to be present exactly
//! once with a matching shape.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chanatt_core::models::{build, ModelConfig, ModelGraph, ModelState};
use chanatt_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 8] = *b"CHANATT\0";
pub const VERSION: u32 = 1;
const DIGEST_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: Option<u64>,
    pub params: usize,
    pub buffers: usize,
}

pub fn encode(graph: &ModelGraph) -> Vec<u8> {
    let header = CheckpointHeader {
        config: *graph.config(),
        seed: graph.seed(),
        params: graph.params().len(),
        buffers: graph.buffers().len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let entries = graph
        .params()
        .iter()
        .map(|p| (0u8, &p.name, &p.value))
        .chain(graph.buffers().iter().map(|b| (1u8, &b.name, &b.value)));
    out.extend_from_slice(&((graph.params().len() + graph.buffers().len()) as u32).to_le_bytes());
    for (kind, name, value) in entries {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.shape().len() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, ModelGraph), String> {
    if bytes.len() < MAGIC.len() + DIGEST_BYTES {
        return Err(format!("file is {} bytes, too short for a checkpoint", bytes.len()));
    }
    if bytes[..8] != MAGIC {
        return Err("bad magic bytes; not a chanatt checkpoint".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_BYTES);
    if Sha256::digest(body).as_slice() != digest {
        return Err("SHA-256 mismatch; the file is corrupt or truncated".into());
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported format version {version} (expected {VERSION})"));
    }
    let len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?).map_err(|e| format!("header: {e}"))?;
    let mut graph = build(header.config).map_err(|e| format!("header config: {e}"))?;
    if graph.params().len() != header.params || graph.buffers().len() != header.buffers {
        return Err(format!(
            "header lists {} params / {} buffers but the configured model has {} / {}",
            header.params,
            header.buffers,
            graph.params().len(),
            graph.buffers().len()
        ));
    }

    let count = r.u32("entry count")? as usize;
    let mut entries: HashMap<(u8, String), Tensor> = HashMap::with_capacity(count);
    for i in 0..count {
        let kind = r.u8("entry kind")?;
        if kind > 1 {
            return Err(format!("entry {i}: unknown kind {kind}"));
        }
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| format!("entry {i}: name is not UTF-8"))?.to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or("tensor size overflows")?, &format!("values of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        if entries.insert((kind, name.clone()), value).is_some() {
            return Err(format!("duplicate entry {name}"));
        }
    }
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes after the last entry", body.len() - r.pos));
    }

    let mut take = |kind: u8, name: &str, shape: &[usize]| {
        let t = entries.remove(&(kind, name.to_string())).ok_or_else(|| format!("missing entry {name}"))?;
        if t.shape() != shape {
            return Err(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), shape));
        }
        Ok(t)
    };
    let params = graph.params().iter().map(|p| take(0, &p.name, p.value.shape())).collect::<std::result::Result<Vec<_>, String>>()?;
    let buffers = graph.buffers().iter().map(|b| take(1, &b.name, b.value.shape())).collect::<std::result::Result<Vec<_>, String>>()?;
    if let Some(((_, name), _)) = entries.iter().next() {
        return Err(format!("entry {name} does not belong to the configured model"));
    }
    graph.load_state(ModelState { params, buffers }).map_err(|e| e.to_string())?;
    graph.set_seed(header.seed);
    Ok((header, graph))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, ModelGraph)> {
    decode_inner(bytes).map_err(|detail| Error::Checkpoint { path: path.to_path_buf(), detail })
}

pub fn save(path: &Path, graph: &ModelGraph) -> Result<()> {
    crate::write_bytes(path, &encode(graph))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ModelGraph)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}
