//! The "TIDB" binary container shared by scaling tensors, feature files and
//! checkpoints.
//!
//! Layout: 4 magic bytes `TIDB`, a little-endian `u32` format version, a
//! little-endian `u32` payload kind, then the kind-specific payload. All
//! multi-byte values are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TIDB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    ScalingTensor = 1,
    Features = 2,
    Checkpoint = 3,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Kind> {
        match v {
            1 => Some(Kind::ScalingTensor),
            2 => Some(Kind::Features),
            3 => Some(Kind::Checkpoint),
            _ => None,
        }
    }
}

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, kind: Kind) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        inner.write_all(&(kind as u32).to_le_bytes())?;
        Ok(Writer { inner })
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn f64_slice(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    /// Validates the header and checks that the payload kind is `expected`.
    pub fn new(mut inner: R, expected: Kind) -> Result<Self> {
        let mut magic = [0u8; 4];
        inner
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for a TIDB header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes, not a TIDB container".into()));
        }
        let mut r = Reader { inner };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported TIDB version {version}")));
        }
        let kind = r.u32()?;
        match Kind::from_u32(kind) {
            Some(k) if k == expected => Ok(r),
            Some(k) => Err(Error::Format(format!(
                "expected a {expected:?} container, found {k:?}"
            ))),
            None => Err(Error::Format(format!("unknown TIDB payload kind {kind}"))),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated TIDB payload".into()))?;
        Ok(b)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.len_prefix(1)?;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated string".into()))?;
        String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    /// Reads a length prefix, rejecting lengths that cannot be real.
    pub fn len_prefix(&mut self, elem_size: usize) -> Result<usize> {
        let len = self.u64()?;
        if len > (1u64 << 40) / elem_size as u64 {
            return Err(Error::Format(format!("implausible length {len}")));
        }
        Ok(len as usize)
    }

    pub fn f64_vec(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated value array".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
