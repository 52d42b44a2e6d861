//! MTF binary feature files.
//!
//! Layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `MTF1` |
//! | 4×6   | `u32` height, width, channels, stride numerator, stride denominator, dtype (0 = f32) |
//! | 4·H·W·C | `f32` values, row-major, channel-last |
//!
//! The role is not stored; it travels in the file name as `<stem>.<role>.mtf`.

use std::path::Path;

use ndarray::Array2;

use crate::error::{format, MatchaError, Result};
use crate::io::write_atomic;
use crate::tensor::{FeatureMap, Role, Stride};

pub const MAGIC: &[u8; 4] = b"MTF1";
const HEADER_LEN: usize = 4 + 6 * 4;

pub fn encode(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.matrix().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [
        map.height() as u32,
        map.width() as u32,
        map.channels() as u32,
        map.stride().num(),
        map.stride().den(),
        0u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.matrix().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], role: Role) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN {
        return format(format!("MTF header truncated ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return format(format!("bad MTF magic {:?}", &bytes[..4]));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (height, width, channels) = (field(0) as usize, field(1) as usize, field(2) as usize);
    let (num, den, dtype) = (field(3), field(4), field(5));
    if dtype != 0 {
        return format(format!("unsupported MTF dtype code {dtype}"));
    }
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| MatchaError::Format("MTF dimensions overflow".into()))?;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() != expected {
        return format(format!("MTF payload is {} bytes, expected {expected}", bytes.len()));
    }
    let stride = Stride::new(num, den).map_err(|e| MatchaError::Format(e.to_string()))?;
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((height * width, channels), values).map_err(|e| MatchaError::Format(e.to_string()))?;
    FeatureMap::new(height, width, stride, role, data).map_err(|e| MatchaError::Format(e.to_string()))
}

/// `<dir>/<stem>.<role>.mtf`
pub fn file_name(stem: &str, role: Role) -> String {
    format!("{stem}.{role}.mtf")
}

/// Role encoded in a `<stem>.<role>.mtf` file name.
pub fn role_from_path(path: &Path) -> Option<Role> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".mtf")?;
    let (_, role) = stem.rsplit_once('.')?;
    Role::parse(role)
}

pub fn read(path: &Path) -> Result<FeatureMap> {
    let role = role_from_path(path)
        .ok_or_else(|| MatchaError::Format(format!("{}: file name carries no role suffix", path.display())))?;
    read_as(path, role)
}

pub fn read_as(path: &Path, role: Role) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, role).map_err(|e| MatchaError::Format(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, map: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn sample() -> FeatureMap {
        FeatureMap::from_fn(3, 2, 4, Stride::new(128, 9).unwrap(), Role::Dino, |y, x, c| {
            (y * 8 + x * 4 + c) as f64 * 0.25 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"MTF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 128);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 28 + 24 * 4);
        // second value is cell (0,0) channel 1
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), -0.75);
    }

    #[test]
    fn round_trip() {
        let m = sample();
        assert_eq!(decode(&encode(&m), Role::Dino).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 1], Role::Dino), Err(MatchaError::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, Role::Dino), Err(MatchaError::Format(_))));
        assert!(matches!(decode(b"MTF", Role::Dino), Err(MatchaError::Format(_))));
    }

    #[test]
    fn role_suffix() {
        assert_eq!(role_from_path(&PathBuf::from("/x/img_a.semantic_raw.mtf")), Some(Role::SemanticRaw));
        assert_eq!(role_from_path(&PathBuf::from("img_a.mtf")), None);
        assert_eq!(file_name("a", Role::Unified), "a.unified.mtf");
    }
}
