//! Raw u16 label grids: magic `CTXL1`, u32 LE height, u32 LE width, then
//! height·width u16 LE labels in row-major order. 65535 marks unlabeled.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatErrorKind, Result};
use crate::maps::LabelMap;

use super::container::write_atomic;

pub const MAGIC: &[u8; 5] = b"CTXL1";
const PREFIX: usize = MAGIC.len() + 8;

pub fn label_map_to_bytes(map: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX + map.raw().len() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for l in map.raw() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn label_map_from_bytes(bytes: &[u8]) -> Result<LabelMap> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(FormatErrorKind::BadMagic, "expected CTXL1"));
    }
    if bytes.len() < PREFIX {
        return Err(Error::format(FormatErrorKind::TruncatedPayload, "file ends inside the extents"));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(FormatErrorKind::MalformedHeader, format!("extents {h}×{w}")));
    }
    let payload = &bytes[PREFIX..];
    let need = h * w * 2;
    if payload.len() < need {
        return Err(Error::format(
            FormatErrorKind::TruncatedPayload,
            format!("{h}×{w} labels need {need} bytes, file has {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format(
            FormatErrorKind::LengthMismatch,
            format!("{} trailing bytes", payload.len() - need),
        ));
    }
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelMap::new(h, w, labels)
}

pub fn write_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    write_atomic(path, &label_map_to_bytes(map))
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    label_map_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlabeled_round_trip() {
        let m = LabelMap::unlabeled(3, 5);
        assert_eq!(label_map_from_bytes(&label_map_to_bytes(&m)).unwrap(), m);
    }

    #[test]
    fn truncated_and_trailing() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, LabelMap::UNLABELED]).unwrap();
        let b = label_map_to_bytes(&m);
        assert!(matches!(
            label_map_from_bytes(&b[..b.len() - 1]),
            Err(Error::Format { kind: FormatErrorKind::TruncatedPayload, .. })
        ));
        let mut longer = b.clone();
        longer.push(0);
        assert!(matches!(
            label_map_from_bytes(&longer),
            Err(Error::Format { kind: FormatErrorKind::LengthMismatch, .. })
        ));
        assert!(matches!(
            label_map_from_bytes(b"CTXF1"),
            Err(Error::Format { kind: FormatErrorKind::BadMagic, .. })
        ));
    }
}
