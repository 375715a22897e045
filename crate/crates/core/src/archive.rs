//! Named-array archive: the on-disk format for network parameters and
//! checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CPGN"
//! version u32 (currently 1)
//! count   u32
//! entry*  name_len u32, name bytes, ndim u32, dims u32*, payload f32* (LE)
//! meta_len u32, meta bytes (opaque; JSON in checkpoints, empty allowed)
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CPGN";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Tensor<f32>)>,
    pub meta: Vec<u8>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let mut magic = [0u8; 4];
        r.read_exact_buf(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a parameter archive".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported archive version {} (expected {})",
                version, VERSION
            )));
        }
        let count = r.read_u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32()? as usize;
            let name = String::from_utf8(r.read_bytes(name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("entry name not utf-8: {}", e)))?;
            let ndim = r.read_u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact_buf(&mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        let meta_len = r.read_u32()? as usize;
        let meta = r.read_bytes(meta_len)?.to_vec();
        Ok(Archive { entries, meta })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("archive truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_exact_buf(&mut self, out: &mut [u8]) -> Result<()> {
        let s = self.read_bytes(out.len())?;
        out.copy_from_slice(s);
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_buf(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}
