//! Little-endian binary containers: SMF1 spectrograms and KMC1 centroids.

use std::fs;
use std::path::Path;

use crate::audio::LogMelSpectrogram;
use crate::clustering::KMeansModel;
use crate::error::{Result, SlicerError};

pub const SMF1_MAGIC: &[u8; 4] = b"SMF1";
pub const KMC1_MAGIC: &[u8; 4] = b"KMC1";

/// Sequential reader over a byte slice that reports truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self {
            buf,
            pos: 0,
            format,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(SlicerError::format(
                self.format,
                format!(
                    "truncated: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(SlicerError::format(
                self.format,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            SlicerError::format(self.format, format!("element count {n} overflows"))
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SlicerError::format(
                self.format,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| SlicerError::InvalidInput(format!("{what} {v} exceeds u32")))
}

pub fn encode_smf1(spec: &LogMelSpectrogram) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + spec.values().len() * 8);
    out.extend_from_slice(SMF1_MAGIC);
    put_u32(&mut out, dim_u32(spec.n_mels(), "F")?);
    put_u32(&mut out, dim_u32(spec.n_frames(), "T")?);
    put_u32(&mut out, 0);
    put_f64s(&mut out, spec.values());
    Ok(out)
}

pub fn decode_smf1(bytes: &[u8]) -> Result<LogMelSpectrogram> {
    let mut r = Reader::new(bytes, "SMF1");
    r.magic(SMF1_MAGIC)?;
    let f = r.u32()? as usize;
    let t = r.u32()? as usize;
    let _reserved = r.u32()?;
    let values = r.f64s(f * t)?;
    r.finish()?;
    LogMelSpectrogram::new(f, t, values)
}

pub fn write_smf1(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    fs::write(path, encode_smf1(spec)?)?;
    Ok(())
}

pub fn read_smf1(path: &Path) -> Result<LogMelSpectrogram> {
    decode_smf1(&fs::read(path)?)
}

pub fn encode_kmc1(model: &KMeansModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + model.centroids().len() * 8);
    out.extend_from_slice(KMC1_MAGIC);
    put_u32(&mut out, dim_u32(model.k(), "k")?);
    put_u32(&mut out, dim_u32(model.dim(), "dim")?);
    put_f64s(&mut out, model.centroids());
    Ok(out)
}

pub fn decode_kmc1(bytes: &[u8]) -> Result<KMeansModel> {
    let mut r = Reader::new(bytes, "KMC1");
    r.magic(KMC1_MAGIC)?;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let values = r.f64s(k * dim)?;
    r.finish()?;
    KMeansModel::new(k, dim, values)
}

pub fn write_kmc1(path: &Path, model: &KMeansModel) -> Result<()> {
    fs::write(path, encode_kmc1(model)?)?;
    Ok(())
}

pub fn read_kmc1(path: &Path) -> Result<KMeansModel> {
    decode_kmc1(&fs::read(path)?)
}
