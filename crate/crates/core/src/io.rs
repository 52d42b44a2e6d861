//! File plumbing shared by the artifact writers: atomic writes and the CSV
//! point formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MatchaError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never observes a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| MatchaError::Domain(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> MatchaError {
    MatchaError::Format(format!("{}: {e}", path.display()))
}

/// Reads CSV rows with a required header into `T`.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_err(path, e))
}

pub fn csv_bytes<T: Serialize>(rows: &[T], header_if_empty: &[&str]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(Vec::new());
    if rows.is_empty() {
        writer.write_record(header_if_empty).map_err(|e| MatchaError::Format(e.to_string()))?;
    }
    for r in rows {
        writer.serialize(r).map_err(|e| MatchaError::Format(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| MatchaError::Format(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header_if_empty: &[&str]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows, header_if_empty)?)
}

/// One row of a keypoints CSV (`x,y`), in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub x: f64,
    pub y: f64,
}

pub fn read_keypoints(path: &Path) -> Result<Vec<[f64; 2]>> {
    let rows: Vec<KeypointRow> = read_csv(path)?;
    Ok(rows.into_iter().map(|r| [r.x, r.y]).collect())
}

pub fn write_keypoints(path: &Path, points: &[[f64; 2]]) -> Result<()> {
    let rows: Vec<KeypointRow> = points.iter().map(|p| KeypointRow { x: p[0], y: p[1] }).collect();
    write_csv(path, &rows, &["x", "y"])
}

/// One row of a ground-truth track CSV (`frame,point_id,x,y,visible`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub frame: usize,
    pub point_id: usize,
    pub x: f64,
    pub y: f64,
    pub visible: u8,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoints_round_trip() {
        let dir = tempdir();
        let p = dir.join("kp.csv");
        write_keypoints(&p, &[[1.5, 2.0], [3.0, -0.25]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y\n1.5,2.0\n3.0,-0.25\n");
        assert_eq!(read_keypoints(&p).unwrap(), vec![[1.5, 2.0], [3.0, -0.25]]);
        write_keypoints(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y\n");
        assert!(read_keypoints(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_csv_is_format_error() {
        let dir = tempdir();
        let p = dir.join("bad.csv");
        fs::write(&p, "x,y\n1.0,abc\n").unwrap();
        assert!(matches!(read_keypoints(&p), Err(MatchaError::Format(_))));
    }

    fn tempdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("matcha-io-{}-{:?}", std::process::id(), std::thread::current().id()));
        fs::create_dir_all(&d).unwrap();
        d
    }
}
