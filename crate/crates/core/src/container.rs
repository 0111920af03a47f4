//! Little-endian tensor container shared by synthetic batches, embedding
//! sets and checkpoints.
//!
//! ```text
//! magic    8 bytes  "LATPFN\0\0"
//! version  u32
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! tensor*  u32 name length + name, u32 rank, u64 dims..., f32 data...
//! crc32    u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use latpfn_autodiff::Tensor;
use serde_json::Value;

use crate::data::{ContextBatch, NormStats};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LATPFN\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_string(),
            msg: msg.to_string(),
        }
    }
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("container has no tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(buf: &[u8], path: &str) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_string(),
            msg,
        };
        if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
            return Err(fail("not a container (bad magic)".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(fail("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|e| fail(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| fail("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes after tensors".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&buf, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Stores batches under `batch{i}/...` with normalization statistics in the
/// metadata.
pub fn batches_to_container(batches: &[ContextBatch], mut meta: Value) -> Result<Container> {
    let stats: Vec<Vec<NormStats>> = batches.iter().map(|b| b.stats.clone()).collect();
    if let Value::Object(m) = &mut meta {
        m.insert("batches".into(), Value::from(batches.len()));
        m.insert("stats".into(), serde_json::to_value(stats)?);
    }
    let mut c = Container::new(meta);
    for (i, b) in batches.iter().enumerate() {
        c.push(format!("batch{i}/context"), b.context.clone());
        c.push(format!("batch{i}/history"), b.history.clone());
        c.push(format!("batch{i}/target"), b.target.clone());
        if let Some(si) = &b.si_target {
            c.push(format!("batch{i}/si"), si.clone());
        }
    }
    Ok(c)
}

pub fn container_to_batches(c: &Container) -> Result<Vec<ContextBatch>> {
    let n = c
        .meta
        .get("batches")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Data("container metadata lacks a batch count".into()))? as usize;
    let stats: Vec<Vec<NormStats>> = serde_json::from_value(c.meta.get("stats").cloned().unwrap_or(Value::Null))?;
    (0..n)
        .map(|i| {
            Ok(ContextBatch {
                context: c.require(&format!("batch{i}/context"))?.clone(),
                history: c.require(&format!("batch{i}/history"))?.clone(),
                target: c.require(&format!("batch{i}/target"))?.clone(),
                stats: stats.get(i).cloned().unwrap_or_default(),
                si_target: c.get(&format!("batch{i}/si")).cloned(),
            })
        })
        .collect()
}
