//! File access for every on-disk format, little-endian binary helpers, and the
//! per-thread read audit used to prove which files a computation touched.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

thread_local! {
    static READ_LOG: RefCell<Option<Vec<PathBuf>>> = const { RefCell::new(None) };
}

/// Records every path opened for reading through this module on the current
/// thread until [`ReadAudit::finish`] is called or the guard is dropped.
pub struct ReadAudit {
    _private: (),
}

impl ReadAudit {
    pub fn start() -> Self {
        READ_LOG.with(|l| *l.borrow_mut() = Some(Vec::new()));
        ReadAudit { _private: () }
    }

    pub fn finish(self) -> Vec<PathBuf> {
        READ_LOG.with(|l| l.borrow_mut().take().unwrap_or_default())
    }
}

impl Drop for ReadAudit {
    fn drop(&mut self) {
        READ_LOG.with(|l| l.borrow_mut().take());
    }
}

fn record_read(path: &Path) {
    READ_LOG.with(|l| {
        if let Some(log) = l.borrow_mut().as_mut() {
            log.push(path.to_path_buf());
        }
    });
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    record_read(path);
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    record_read(path);
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'a str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::TruncatedFile(format!(
                    "{}: wanted {n} bytes at offset {}, file has {}",
                    self.what,
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Data("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Data("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}
