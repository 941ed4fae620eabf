//! Binary interchange format for precomputed feature maps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MSFT"
//! 4       4     format version (u32, currently 1)
//! 8       1     modality code (0 = RGB, 1 = infrared, 2 = point cloud)
//! 9       4     grid rows (u32, 0 for ungridded point features)
//! 13      4     grid cols (u32, 0 likewise)
//! 17      8     row count (u64)
//! 25      4     feature dimension (u32)
//! 29      ...   row count × dimension f32 values, row-major
//! ```
//!
//! Reads validate the header before touching the payload, reject NaN or
//! infinite entries, and round-trip byte-for-byte with writes.

use std::fs;
use std::path::Path;

use crate::core::ModalityId;
use crate::features::PatchFeatureMap;

use super::IngestError;

pub const MAGIC: &[u8; 4] = b"MSFT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 29;

pub(crate) fn modality_code(m: ModalityId) -> u8 {
    match m {
        ModalityId::Rgb => 0,
        ModalityId::Infrared => 1,
        ModalityId::Pointcloud => 2,
    }
}

pub(crate) fn modality_from_code(c: u8) -> Option<ModalityId> {
    match c {
        0 => Some(ModalityId::Rgb),
        1 => Some(ModalityId::Infrared),
        2 => Some(ModalityId::Pointcloud),
        _ => None,
    }
}

pub fn write_feature_matrix(map: &PatchFeatureMap, path: &Path) -> Result<(), IngestError> {
    let (rows, cols) = map.grid.unwrap_or((0, 0));
    let count = map.count() as u64;
    let mut bytes = Vec::with_capacity(HEADER_LEN + map.values.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(modality_code(map.modality));
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    bytes.extend_from_slice(&count.to_le_bytes());
    bytes.extend_from_slice(&(map.dim as u32).to_le_bytes());
    for &v in &map.values {
        if !v.is_finite() {
            return Err(IngestError::Feature("refusing to write non-finite value".into()));
        }
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| IngestError::io(path, e))
}

pub fn read_feature_matrix(path: &Path) -> Result<PatchFeatureMap, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
    parse(&bytes).map_err(|msg| IngestError::Feature(format!("{}: {msg}", path.display())))
}

fn parse(bytes: &[u8]) -> Result<PatchFeatureMap, String> {
    if bytes.len() < HEADER_LEN {
        return Err("file shorter than the header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("not a MSFT file".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let modality = modality_from_code(bytes[8])
        .ok_or_else(|| format!("unknown modality code {}", bytes[8]))?;
    let rows = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[25..29].try_into().unwrap());

    if (rows == 0) != (cols == 0) {
        return Err(format!("inconsistent grid {rows}x{cols}"));
    }
    let grid = if rows > 0 {
        if rows as u64 * cols as u64 != count {
            return Err(format!(
                "grid {rows}x{cols} implies {} rows, header says {count}",
                rows as u64 * cols as u64
            ));
        }
        Some((rows, cols))
    } else {
        None
    };
    if count == 0 || dim == 0 {
        return Err("empty feature matrix".into());
    }
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or("payload size overflows")? as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        ));
    }
    if payload.len() > expected {
        return Err(format!(
            "trailing bytes after payload: expected {expected}, found {}",
            payload.len()
        ));
    }
    let mut values = Vec::with_capacity((count * dim as u64) as usize);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format!("non-finite value at index {}", values.len()));
        }
        values.push(v);
    }
    PatchFeatureMap::new(modality, grid, dim as usize, values).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map(rows: u32, cols: u32, dim: usize) -> PatchFeatureMap {
        let count = rows as usize * cols as usize;
        let values: Vec<f32> = (0..count * dim).map(|i| (i as f32) * 0.125 - 3.0).collect();
        PatchFeatureMap::new(ModalityId::Rgb, Some((rows, cols)), dim, values).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a.msft");
        let b = tmp.path().join("b.msft");
        let map = sample_map(28, 28, 768);
        write_feature_matrix(&map, &a).unwrap();
        let back = read_feature_matrix(&a).unwrap();
        assert_eq!(back, map);
        write_feature_matrix(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn ungridded_point_features_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("pc.msft");
        let values: Vec<f32> = (0..5 * 33).map(|i| i as f32).collect();
        let map = PatchFeatureMap::new(ModalityId::Pointcloud, None, 33, values).unwrap();
        write_feature_matrix(&map, &path).unwrap();
        let back = read_feature_matrix(&path).unwrap();
        assert_eq!(back.grid, None);
        assert_eq!(back, map);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.msft");
        let map = sample_map(2, 2, 3);
        write_feature_matrix(&map, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = read_feature_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("not a MSFT file"), "{err}");
    }

    #[test]
    fn grid_row_count_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("short.msft");
        let map = sample_map(28, 28, 4);
        write_feature_matrix(&map, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Claim 783 rows against a 28x28 grid.
        bytes[17..25].copy_from_slice(&783u64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = read_feature_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("grid 28x28"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("trunc.msft");
        let map = sample_map(4, 4, 8);
        write_feature_matrix(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_feature_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn nan_payload_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("nan.msft");
        let map = sample_map(2, 2, 2);
        write_feature_matrix(&map, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = read_feature_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }
}
