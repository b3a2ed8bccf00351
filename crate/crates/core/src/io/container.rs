//! `CTXF1` tensor container: magic, little-endian u64 header length, JSON
//! header, then the little-endian f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CTXF1";
const PREFIX: usize = MAGIC.len() + 8;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    entries: Vec<EntryHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    network_config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
    /// Byte length of the entry.
    length: u64,
}

/// Ordered named tensors plus optional category names and network config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, Tensor)>,
    pub categories: Option<Vec<String>>,
    pub network_config: Option<serde_json::Value>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry, replacing any existing entry of the same name.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut headers = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let length = (t.len() * 8) as u64;
            headers.push(EntryHeader {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            dtype: "f64".into(),
            entries: headers,
            categories: self.categories.clone(),
            network_config: self.network_config.clone(),
        })?;
        let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(FormatErrorKind::BadMagic, "expected CTXF1"));
        }
        if bytes.len() < PREFIX {
            return Err(Error::format(FormatErrorKind::TruncatedPayload, "file ends inside the header length"));
        }
        let header_len = u64::from_le_bytes(bytes[MAGIC.len()..PREFIX].try_into().unwrap());
        let header_end = (PREFIX as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::format(FormatErrorKind::TruncatedPayload, "file ends inside the JSON header"))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
            .map_err(|e| Error::format(FormatErrorKind::MalformedHeader, e.to_string()))?;
        if header.dtype != "f64" {
            return Err(Error::format(
                FormatErrorKind::MalformedHeader,
                format!("unsupported dtype `{}`", header.dtype),
            ));
        }
        let payload = &bytes[header_end..];
        let mut entries = Vec::with_capacity(header.entries.len());
        let mut expected_offset = 0u64;
        for e in header.entries {
            let count: usize = e.shape.iter().product();
            if e.shape.is_empty() && count != 1 || e.shape.contains(&0) {
                return Err(Error::format(
                    FormatErrorKind::MalformedHeader,
                    format!("entry `{}` has invalid shape {:?}", e.name, e.shape),
                ));
            }
            if e.length != (count * 8) as u64 {
                return Err(Error::format(
                    FormatErrorKind::LengthMismatch,
                    format!("entry `{}` declares {} bytes for shape {:?}", e.name, e.length, e.shape),
                ));
            }
            if e.offset != expected_offset {
                return Err(Error::format(
                    FormatErrorKind::LengthMismatch,
                    format!("entry `{}` starts at byte {} but {} was expected", e.name, e.offset, expected_offset),
                ));
            }
            let end = e.offset + e.length;
            if end > payload.len() as u64 {
                return Err(Error::format(
                    FormatErrorKind::TruncatedPayload,
                    format!("entry `{}` needs {end} payload bytes, file has {}", e.name, payload.len()),
                ));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((e.name, Tensor::new(e.shape, data)?));
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::format(
                FormatErrorKind::LengthMismatch,
                format!("{} trailing payload bytes", payload.len() as u64 - expected_offset),
            ));
        }
        Ok(TensorContainer {
            entries,
            categories: header.categories,
            network_config: header.network_config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.push("a", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25));
        c.push("b", Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap());
        c.categories = Some(vec!["x".into(), "y".into()]);
        c
    }

    fn kind(err: Error) -> FormatErrorKind {
        match err {
            Error::Format { kind, .. } => kind,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.entries().len(), 2);
        for ((n1, t1), (n2, t2)) in c.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
        assert_eq!(back.categories, c.categories);
    }

    #[test]
    fn error_categories() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(kind(TensorContainer::from_bytes(&bad).unwrap_err()), FormatErrorKind::BadMagic);
        assert_eq!(
            kind(TensorContainer::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err()),
            FormatErrorKind::TruncatedPayload
        );
        assert_eq!(kind(TensorContainer::from_bytes(&bytes[..9]).unwrap_err()), FormatErrorKind::TruncatedPayload);
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert_eq!(kind(TensorContainer::from_bytes(&extra).unwrap_err()), FormatErrorKind::LengthMismatch);
        let mut garbled = bytes;
        garbled[PREFIX] = b'[';
        assert_eq!(kind(TensorContainer::from_bytes(&garbled).unwrap_err()), FormatErrorKind::MalformedHeader);
    }

    #[test]
    fn push_replaces() {
        let mut c = TensorContainer::new();
        c.push("w", Tensor::zeros(&[1]));
        c.push("w", Tensor::full(&[1], 2.0));
        assert_eq!(c.entries().len(), 1);
        assert_eq!(c.get("w").unwrap().item(), 2.0);
    }
}
