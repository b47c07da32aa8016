//! On-disk formats: annotation sidecars and the dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::place::BoxAnnotation;
use crate::{Error, Result};

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image: String,
    pub annotations: String,
    pub text: Option<String>,
    pub width: u32,
    pub height: u32,
}

/// Writes one `class_id x1 y1 x2 y2` line per box.
pub fn write_annotations(path: &Path, boxes: &[BoxAnnotation]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!("{} {} {} {} {}\n", b.class_id, b.x1, b.y1, b.x2, b.y2));
    }
    fs::write(path, out).map_err(|e| Error::Io(path.to_path_buf(), e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let file = fs::File::open(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    let mut boxes = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
        }
        let num = |s: &str| -> Result<u32> {
            s.parse().map_err(|_| parse_err(format!("invalid integer {:?}", s)))
        };
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid class id {:?}", fields[0])))?;
        let (x1, y1, x2, y2) = (num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?);
        if x2 <= x1 || y2 <= y1 {
            return Err(parse_err(format!("degenerate box {} {} {} {}", x1, y1, x2, y2)));
        }
        boxes.push(BoxAnnotation { class_id, x1, y1, x2, y2 });
    }
    Ok(boxes)
}

/// Writes the manifest as JSON lines, one row per image.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Image(e.to_string()))?;
        writeln!(file, "{}", line).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}
