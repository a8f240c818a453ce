//! Binary checkpoint: magic, version, config text, tensor records.
//!
//! ```text
//! "SHEDCKPT" | u32 version | u32 len | config (key=value, sorted)
//! u32 count | { u32 name_len | name | u32 rank | u32 dims[rank] | f32 data[] } * count
//! ```
//! Integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::ndcore::Array;

use super::config::ModelConfig;
use super::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"SHEDCKPT";
pub const VERSION: u32 = 1;

/// Parsed checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: KvMap,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: KvMap, tensors: ParamStore<f32>) -> Self {
        Self { config, tensors }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let model: KvMap = self
            .config
            .iter()
            .filter(|(k, _)| k.starts_with("model."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ModelConfig::from_kv(&model)
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (n, a) in self.tensors.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, a.clone()).expect("names unique");
            }
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let text = kv::render(&self.config);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut buf, text.len())?;
        buf.extend_from_slice(text.as_bytes());
        put_u32(&mut buf, self.tensors.len())?;
        for (name, a) in self.tensors.iter() {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, a.shape().len())?;
            for &d in a.shape() {
                put_u32(&mut buf, d)?;
            }
            for v in a.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (magic mismatch)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.u32()? as usize;
        let text = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = kv::parse(text)?;
        let count = cur.u32()? as usize;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors
                .insert(name, Array::from_vec(&shape, data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
