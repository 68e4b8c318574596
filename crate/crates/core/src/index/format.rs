//! Byte-level codecs shared by the index (`MVIX`) and embedding (`MVE1`) files.
//!
//! Everything is little-endian. A token-matrix record is
//! `u32 id_len · id bytes (UTF-8) · u32 rows · rows*dim values in dtype`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fp16;
use crate::types::{Dtype, TokenMatrix};

pub(crate) const EMBEDDING_MAGIC: &[u8; 4] = b"MVE1";

/// Sequential reader over an in-memory file that reports truncation.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    /// Consumes a 4-byte magic, mapping any shortfall or mismatch to
    /// `BadMagic`.
    pub(crate) fn magic(&mut self, expected: &'static [u8; 4], name: &'static str) -> Result<()> {
        match self.take(4, "magic") {
            Ok(m) if m == expected => Ok(()),
            _ => Err(Error::BadMagic { expected: name }),
        }
    }

    pub(crate) fn record(&mut self, dim: usize, dtype: Dtype) -> Result<(String, TokenMatrix)> {
        let id_len = self.u32("id length")? as usize;
        let id = std::str::from_utf8(self.take(id_len, "id bytes")?)
            .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?
            .to_string();
        let rows = self.u32("row count")? as usize;
        if rows == 0 {
            return Err(Error::Format(format!("record {id:?} has zero rows")));
        }
        let count = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::Format(format!("record {id:?} is too large")))?;
        let raw = self.take(
            count
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("record {id:?} is too large")))?,
            "token values",
        )?;
        let values = decode_values(raw, dtype)?;
        Ok((id, TokenMatrix::new(rows, dim, values)?))
    }
}

pub(crate) fn decode_values(raw: &[u8], dtype: Dtype) -> Result<Vec<f64>> {
    match dtype {
        Dtype::Float32 => raw
            .chunks_exact(4)
            .map(|b| {
                let v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Format(format!("non-finite stored value {v}")))
                }
            })
            .collect(),
        Dtype::Float16 => raw
            .chunks_exact(2)
            .map(|b| {
                let v = fp16::decode(u16::from_le_bytes([b[0], b[1]]))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Format(format!("non-finite stored value {v}")))
                }
            })
            .collect(),
    }
}

/// Rounds a value to the nearest representable value of `dtype`.
pub fn quantize_value(v: f64, dtype: Dtype) -> Result<f64> {
    match dtype {
        Dtype::Float32 => {
            let q = f64::from(v as f32);
            if q.is_finite() {
                Ok(q)
            } else {
                Err(Error::Overflow(format!("{v} does not fit in float32")))
            }
        }
        Dtype::Float16 => fp16::quantize(v),
    }
}

pub fn quantize_matrix(m: &TokenMatrix, dtype: Dtype) -> Result<TokenMatrix> {
    let values = m
        .values()
        .iter()
        .map(|&v| quantize_value(v, dtype))
        .collect::<Result<_>>()?;
    TokenMatrix::new(m.rows(), m.dim(), values)
}

pub(crate) fn write_record<W: Write>(
    w: &mut W,
    id: &str,
    m: &TokenMatrix,
    dtype: Dtype,
) -> Result<()> {
    let id_len = u32::try_from(id.len()).map_err(|_| Error::Format("id too long".into()))?;
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format("too many rows".into()))?;
    w.write_all(&id_len.to_le_bytes())?;
    w.write_all(id.as_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    match dtype {
        Dtype::Float32 => {
            for &v in m.values() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::Float16 => {
            for &v in m.values() {
                w.write_all(&fp16::encode(v)?.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub(crate) fn dim_to_u16(dim: usize) -> Result<u16> {
    match u16::try_from(dim) {
        Ok(d) if d > 0 => Ok(d),
        _ => Err(Error::Format(format!("dimension {dim} outside 1..=65535"))),
    }
}

/// Contents of an `MVE1` embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dtype: Dtype,
    pub dim: usize,
    /// Records in file order; ids are not validated here.
    pub items: Vec<(String, TokenMatrix)>,
}

impl EmbeddingFile {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(EMBEDDING_MAGIC, "MVE1")?;
        let dtype = Dtype::from_code(r.u8("dtype")?)?;
        let dim = r.u16("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format("header dim must be at least 1".into()));
        }
        let count = r.u64("item count")?;
        let mut items = Vec::new();
        for _ in 0..count {
            items.push(r.record(dim, dtype)?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { dtype, dim, items })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.push(self.dtype.code());
        out.extend_from_slice(&dim_to_u16(self.dim)?.to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for (id, m) in &self.items {
            if m.dim() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    found: m.dim(),
                    context: Some(format!("embedding {id}")),
                });
            }
            write_record(&mut out, id, m, self.dtype)?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    /// Parses every id with `parse`, e.g. `DocId::new`.
    pub fn typed<T>(self, parse: impl Fn(String) -> Result<T>) -> Result<Vec<(T, TokenMatrix)>> {
        self.items
            .into_iter()
            .map(|(id, m)| Ok((parse(id)?, m)))
            .collect()
    }
}
