//! Binary parameter container.
//!
//! Layout (little endian): magic `ECGSYNCK`, u32 format version, u8 dtype
//! tag, u32-prefixed UTF-8 architecture descriptor, u64 seed, u32 parameter
//! count, then per parameter a u16-prefixed name, u8 rank, u32 dims, u8
//! frozen flag and the raw values; a CRC32 of everything before it closes
//! the file.

use std::path::Path;

use super::param::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"ECGSYNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub descriptor: String,
    pub seed: u64,
    pub params: Vec<(String, Tensor<S>, bool)>,
}

impl<S: Real> Checkpoint<S> {
    pub fn from_store(store: &ParamStore<S>, descriptor: &str, seed: u64) -> Self {
        Self {
            descriptor: descriptor.to_string(),
            seed,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone(), p.frozen)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(S::DTYPE);
        out.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t, frozen) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(u8::from(*frozen));
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Checksum("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum("CRC32 mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checksum("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != S::DTYPE {
            return Err(Error::Version(format!("dtype tag {dtype}, expected {}", S::DTYPE)));
        }
        let dlen = r.u32()? as usize;
        let descriptor = String::from_utf8(r.take(dlen)?.to_vec()).map_err(|_| Error::Checksum("descriptor is not UTF-8".into()))?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checksum("name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let frozen = r.take(1)?[0] != 0;
            let n: usize = shape.iter().product();
            let raw = r.take(n * S::BYTES)?;
            let data = raw.chunks(S::BYTES).map(S::read_le).collect();
            params.push((name, Tensor::new(&shape, data)?, frozen));
        }
        if r.pos != body.len() {
            return Err(Error::Checksum("trailing bytes".into()));
        }
        Ok(Self { descriptor, seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes)
    }

    /// Copies values and frozen flags into a store built for the same
    /// architecture.
    pub fn apply(&self, store: &mut ParamStore<S>, descriptor: &str) -> Result<()> {
        if self.descriptor != descriptor {
            return Err(Error::Version(format!(
                "architecture mismatch: checkpoint has `{}`, model is `{descriptor}`",
                self.descriptor
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, t, _)) in store.iter().zip(&self.params) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Version(format!("parameter `{name}` does not match model parameter `{}`", p.name)));
            }
        }
        for (p, (_, t, frozen)) in store.iter_mut().zip(&self.params) {
            p.value = t.clone();
            p.frozen = *frozen;
            p.grad.fill(S::zero());
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checksum("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_store<S: Real>(store: &ParamStore<S>, descriptor: &str, seed: u64, path: &Path) -> Result<()> {
    Checkpoint::from_store(store, descriptor, seed).save(path)
}

/// Loads `path` into `store`; returns the recorded seed.
pub fn load_store<S: Real>(store: &mut ParamStore<S>, descriptor: &str, path: &Path) -> Result<u64> {
    let ck = Checkpoint::<S>::load(path)?;
    ck.apply(store, descriptor)?;
    Ok(ck.seed)
}

/// SHA-256 of a serialized checkpoint, hex encoded.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
