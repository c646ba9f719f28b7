//! Binary formats.
//!
//! A single tensor dump (`TFTN`):
//!
//! ```text
//! "TFTN" | version u8 = 1 | rank u8 | extents: rank × u64 LE | data: f32 LE
//! ```
//!
//! A named-tensor archive (`TFMF`), used for checkpoints and dataset caches:
//!
//! ```text
//! "TFMF" | version u8 = 1 | meta_len u32 LE | meta (UTF-8 JSON)
//! | count u32 LE | count × (name_len u32 | name | offset u64 | rank u8 | rank × u64)
//! | data section: the TFTN dumps, each at `offset` bytes from the section start
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TFTN";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"TFMF";
pub const VERSION: u8 = 1;

pub fn write_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} does not fit in u8", t.rank())))?;
    let mut buf = Vec::with_capacity(6 + 8 * t.rank() + 4 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(VERSION);
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn read_tensor<T: Real>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
    }
    let shape = read_extents(r, head[5])?;
    let mut data = vec![0u8; 4 * numel(&shape)];
    r.read_exact(&mut data).map_err(truncated)?;
    let values = data.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    Tensor::new(&shape, values)
}

fn read_extents(r: &mut impl Read, rank: u8) -> Result<Vec<usize>> {
    (0..rank)
        .map(|_| {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent does not fit in usize".into()))
        })
        .collect()
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of data".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

/// Ordered collection of named tensors plus a free-form metadata string.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub meta: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new(meta: impl Into<String>) -> Self {
        Archive { meta: meta.into(), entries: Vec::new() }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name).map(Tensor::cast).ok_or_else(|| Error::Format(format!("archive has no tensor named `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Vec::new();
        let mut blob = Vec::new();
        header.extend_from_slice(ARCHIVE_MAGIC);
        header.push(VERSION);
        header.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        header.extend_from_slice(self.meta.as_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            header.push(t.rank() as u8);
            for &d in t.shape() {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            blob.extend_from_slice(&encode_tensor(t)?);
        }
        header.extend_from_slice(&blob);
        Ok(header)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic[..4] != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("bad archive magic {:?}", &magic[..4])));
        }
        if magic[4] != VERSION {
            return Err(Error::Format(format!("unsupported archive version {}", magic[4])));
        }
        let meta_len = read_u32(&mut r)? as usize;
        if r.len() < meta_len {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let meta =
            String::from_utf8(r[..meta_len].to_vec()).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        r = &r[meta_len..];
        let count = read_u32(&mut r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if r.len() < len {
                return Err(Error::Format("unexpected end of data".into()));
            }
            let name =
                String::from_utf8(r[..len].to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            r = &r[len..];
            let mut off = [0u8; 8];
            r.read_exact(&mut off).map_err(truncated)?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(truncated)?;
            let shape = read_extents(&mut r, rank[0])?;
            manifest.push((name, u64::from_le_bytes(off) as usize, shape));
        }
        let blob = r;
        let mut entries = Vec::with_capacity(count);
        for (name, offset, shape) in manifest {
            let mut slice =
                blob.get(offset..).ok_or_else(|| Error::Format(format!("offset of `{name}` is past the end")))?;
            let t: Tensor<f32> = read_tensor(&mut slice)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{name}`: manifest shape {shape:?} disagrees with stored {:?}",
                    t.shape()
                )));
            }
            entries.push((name, t));
        }
        Ok(Archive { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
