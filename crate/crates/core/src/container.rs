//! Binary container shared by dataset and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic (e.g. b"PCSRDATA", b"PCSRCKPT")
//! offset 8   u32       header length H in bytes
//! offset 12  H bytes   UTF-8 JSON header
//! offset 12+H          payload blocks: f64 or u64 arrays, order and lengths fixed by the header
//! ```
//!
//! Files end exactly after the last block; trailing bytes are a format error.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{PcsrError, Result};

pub(crate) struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new<H: Serialize>(magic: &[u8; 8], header: &H) -> Result<Self> {
        let json = serde_json::to_vec(header)
            .map_err(|e| PcsrError::config(format!("cannot serialize header: {e}")))?;
        let mut buf = Vec::with_capacity(12 + json.len());
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        Ok(ContainerWriter { buf })
    }

    pub fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u64s(&mut self, values: impl IntoIterator<Item = u64>) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ContainerReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ContainerReader<'a> {
    /// Validates the magic and parses the JSON header.
    pub fn open<H: DeserializeOwned>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(Self, H)> {
        if bytes.len() < 12 {
            return Err(PcsrError::format(
                bytes.len() as u64,
                "file shorter than the 12-byte preamble",
            ));
        }
        if &bytes[..8] != magic {
            return Err(PcsrError::format(0, "bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let end = 12usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                PcsrError::format(bytes.len() as u64, format!("header of {len} bytes is truncated"))
            })?;
        let header = serde_json::from_slice(&bytes[12..end])
            .map_err(|e| PcsrError::format(12 + e.column() as u64, format!("corrupt header: {e}")))?;
        Ok((ContainerReader { bytes, pos: end }, header))
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, count: usize, what: &str) -> Result<&'a [u8]> {
        let need = count
            .checked_mul(8)
            .ok_or_else(|| PcsrError::format(self.pos as u64, format!("{what}: size overflow")))?;
        if self.bytes.len() - self.pos < need {
            return Err(PcsrError::format(
                self.bytes.len() as u64,
                format!(
                    "truncated {what}: needed {need} bytes from offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + need];
        self.pos += need;
        Ok(out)
    }

    pub fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos as u64;
        let raw = self.take(count, what)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PcsrError::format(
                start + 8 * i as u64,
                format!("non-finite value in {what}"),
            ));
        }
        Ok(values)
    }

    pub fn u64s(&mut self, count: usize, what: &str) -> Result<Vec<u64>> {
        let raw = self.take(count, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(PcsrError::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
