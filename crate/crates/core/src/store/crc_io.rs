//! Checksummed little-endian primitives shared by the bag and checkpoint formats.

use std::io::{self, Read, Write};

use super::StoreError;

pub(crate) struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> CrcWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
            written: 0,
        }
    }

    pub(crate) fn put(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.hasher.update(bytes);
        self.written += bytes.len() as u64;
        self.inner.write_all(bytes)
    }

    /// Appends the CRC-32 trailer and returns the total byte count.
    pub(crate) fn finish(mut self) -> Result<u64, StoreError> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok(self.written + 4)
    }
}

pub(crate) struct CrcReader<R> {
    inner: R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> CrcReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    /// Reads the 4-byte trailer and compares it with the CRC of everything read so far.
    pub(crate) fn verify_trailer(&mut self) -> Result<(), StoreError> {
        let computed = self.hasher.clone().finalize();
        let mut trailer = [0u8; 4];
        read_exact_or_truncated(&mut self.inner, &mut trailer)?;
        let stored = u32::from_le_bytes(trailer);
        if stored != computed {
            return Err(StoreError::Checksum { stored, computed });
        }
        Ok(())
    }

    pub(crate) fn take_exact(&mut self, buf: &mut [u8]) -> Result<(), StoreError> {
        read_exact_or_truncated(&mut self.inner, buf)?;
        self.hasher.update(buf);
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32, StoreError> {
        let mut b = [0u8; 4];
        self.take_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, StoreError> {
        let mut b = [0u8; 4];
        self.take_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, StoreError> {
        let mut b = [0u8; 1];
        self.take_exact(&mut b)?;
        Ok(b[0])
    }

    /// Reads `len` bytes without trusting `len` for the allocation size,
    /// so a corrupted length fails as truncation rather than as OOM.
    pub(crate) fn bytes(&mut self, len: usize) -> Result<Vec<u8>, StoreError> {
        const CHUNK: usize = 1 << 20;
        let mut out = Vec::with_capacity(len.min(CHUNK));
        let mut remaining = len;
        let mut chunk = vec![0u8; len.min(CHUNK)];
        while remaining > 0 {
            let n = remaining.min(CHUNK);
            self.take_exact(&mut chunk[..n])?;
            out.extend_from_slice(&chunk[..n]);
            remaining -= n;
        }
        Ok(out)
    }
}

pub(crate) fn read_exact_or_truncated<R: Read>(
    r: &mut R,
    buf: &mut [u8],
) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::Truncated,
        _ => StoreError::Io(e),
    })
}
