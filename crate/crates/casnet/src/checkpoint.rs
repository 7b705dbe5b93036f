//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CASNET" 0x01                      magic and format version
//! u64 manifest length
//! manifest:
//!   u16 len + utf8                   algo tag
//!   u64                              seed
//!   u32 len + utf8                   config snapshot
//!   u32                              tensor count
//!   per tensor: u16 len + utf8 name, u32 rank, rank × u64 dims
//! payload: f64 values of every tensor, row-major, in manifest order
//! u32 CRC32 of the payload
//! ```

use std::path::Path;

use casnet_core::nn::Module;
use casnet_core::Tensor;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 6] = b"CASNET";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub algo: String,
    pub seed: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(algo: &str, seed: u64, config: &str) -> Self {
        Self { algo: algo.to_string(), seed, config: config.to_string(), tensors: Vec::new() }
    }

    /// Append a module's tensors, names prefixed with `prefix.` unless it is empty.
    pub fn add_module<M: Module + ?Sized>(&mut self, prefix: &str, module: &M) {
        for (name, t) in module.param_names().into_iter().zip(module.params()) {
            self.tensors.push((qualify(prefix, &name), t.clone()));
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy stored tensors into `module`. Every parameter must be present with
    /// the module's shape.
    pub fn load_into<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let names = module.param_names();
        for (name, dst) in names.iter().zip(module.params_mut()) {
            let key = qualify(prefix, name);
            let src = self
                .get(&key)
                .ok_or_else(|| casnet_core::Error::Shape(format!("checkpoint has no tensor {key:?}")))?;
            if src.shape() != dst.shape() {
                return Err(casnet_core::Error::Shape(format!(
                    "tensor {key:?}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    dst.shape()
                ))
                .into());
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::new();
        put_str16(&mut manifest, &self.algo)?;
        manifest.extend_from_slice(&self.seed.to_le_bytes());
        let config_len = u32::try_from(self.config.len()).map_err(|_| too_long("config"))?;
        manifest.extend_from_slice(&config_len.to_le_bytes());
        manifest.extend_from_slice(self.config.as_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| too_long("tensor list"))?;
        manifest.extend_from_slice(&count.to_le_bytes());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            put_str16(&mut manifest, name)?;
            manifest.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                manifest.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(15 + manifest.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(format_err(6, &format!("unsupported format version {version}")));
        }
        let manifest_len = r.u64()?;
        let manifest_end = r.pos.checked_add(manifest_len as usize).filter(|&e| e <= bytes.len());
        let Some(manifest_end) = manifest_end else {
            return Err(format_err(7, "manifest length runs past end of file"));
        };
        let algo = r.str16()?;
        let seed = r.u64()?;
        let config_len = r.u32()? as usize;
        let config = r.utf8(config_len)?;
        let count = r.u32()?;
        let mut shapes = Vec::new();
        for _ in 0..count {
            let name = r.str16()?;
            let rank = r.u32()?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                let at = r.pos;
                let d = usize::try_from(r.u64()?).map_err(|_| format_err(at as u64, "dimension too large"))?;
                shape.push(d);
            }
            shapes.push((name, shape));
        }
        if r.pos != manifest_end {
            return Err(format_err(r.pos as u64, "manifest length does not match its contents"));
        }
        let payload_start = r.pos;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let at = r.pos as u64;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err(at, "tensor size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| format_err(at, "tensor size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err(at, &e.to_string()))?;
            tensors.push((name, t));
        }
        let payload = &bytes[payload_start..r.pos];
        let crc_at = r.pos as u64;
        if r.u32()? != crc32fast::hash(payload) {
            return Err(format_err(crc_at, "payload checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos as u64, "trailing bytes after checksum"));
        }
        Ok(Self { algo, seed, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn qualify(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn format_err(offset: u64, message: &str) -> HarnessError {
    HarnessError::Format { offset, message: message.to_string() }
}

fn too_long(what: &str) -> HarnessError {
    HarnessError::Config(format!("{what} too long for the checkpoint format"))
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| too_long("name"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(format_err(self.buf.len() as u64, &format!("truncated: needed {n} bytes at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize) -> Result<String> {
        let at = self.pos as u64;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(at, "invalid utf-8"))
    }

    fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        self.utf8(len)
    }
}
