//! Flat binary containers shared by the model, spectrogram, and posterior
//! file formats: an 8-byte magic, little-endian `u64` header fields, then
//! raw little-endian `f64` arrays. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct ContainerWriter<'p> {
    path: &'p Path,
    inner: BufWriter<File>,
}

impl<'p> ContainerWriter<'p> {
    pub fn create(path: &'p Path, magic: &[u8; 8]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = ContainerWriter {
            path,
            inner: BufWriter::new(file),
        };
        writer.write_bytes(magic)?;
        Ok(writer)
    }

    fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(self.path, e))
    }

    pub fn write_u64(&mut self, value: u64) -> Result<()> {
        self.write_bytes(&value.to_le_bytes())
    }

    pub fn write_f64_slice(&mut self, values: &[f64]) -> Result<()> {
        for &v in values {
            self.write_bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(self.path, e))
    }
}

pub(crate) struct ContainerReader<'p> {
    path: &'p Path,
    inner: BufReader<File>,
}

impl<'p> ContainerReader<'p> {
    pub fn open(path: &'p Path, magic: &[u8; 8]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = ContainerReader {
            path,
            inner: BufReader::new(file),
        };
        let mut found = [0u8; 8];
        reader.read_bytes(&mut found)?;
        if &found != magic {
            return Err(Error::invalid(format!(
                "{}: bad magic {:?}, expected {:?}",
                reader.path.display(),
                found,
                magic
            )));
        }
        Ok(reader)
    }

    fn read_bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::io(self.path, e))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read_bytes(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Read a `u64` header field and convert it to `usize`, rejecting values
    /// that cannot index memory on this platform.
    pub fn read_dim(&mut self, what: &str) -> Result<usize> {
        let raw = self.read_u64()?;
        usize::try_from(raw).map_err(|_| {
            Error::invalid(format!(
                "{}: {what} = {raw} does not fit in usize",
                self.path.display()
            ))
        })
    }

    pub fn read_f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            self.read_bytes(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    }
}
