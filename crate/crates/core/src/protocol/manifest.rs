use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::HierLabel;

use super::{check_unique_ids, LabeledSample, ProtocolError, SampleSource};

pub const BINARY_HEADER: [&str; 3] = ["id", "path", "label"];
pub const HIER_HEADER: [&str; 3] = ["id", "path", "hier_label"];

#[derive(Debug, Deserialize, Serialize)]
struct BinaryRow {
    id: String,
    path: String,
    label: u8,
}

/// Row of a hierarchical manifest, with `path` resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: HierLabel,
}

#[derive(Debug, Deserialize)]
struct HierRow {
    id: String,
    path: String,
    hier_label: String,
}

fn manifest_error(path: &Path, message: impl std::fmt::Display) -> ProtocolError {
    ProtocolError::Manifest {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn open(path: &Path, header: [&str; 3]) -> Result<csv::Reader<std::fs::File>, ProtocolError> {
    let file = std::fs::File::open(path).map_err(|source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| manifest_error(path, e))?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(manifest_error(
            path,
            format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(reader)
}

fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Reads `id,path,label` with labels 0/1. Relative paths are taken from
/// the manifest's directory.
pub fn read_binary_manifest(path: &Path) -> Result<Vec<LabeledSample>, ProtocolError> {
    let mut reader = open(path, BINARY_HEADER)?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<BinaryRow>().enumerate() {
        let row = row.map_err(|e| manifest_error(path, e))?;
        let label = match row.label {
            0 => false,
            1 => true,
            other => {
                return Err(manifest_error(
                    path,
                    format!("row {}: label must be 0 or 1, got {other}", line + 2),
                ))
            }
        };
        out.push(LabeledSample {
            source: SampleSource::Path(resolve(path, &row.path)),
            id: row.id,
            label,
        });
    }
    check_unique_ids(out.iter().map(|s| s.id.as_str()))?;
    Ok(out)
}

/// Reads `id,path,hier_label` with labels `no_eye`, `eye_bad_light` or
/// `eye_good_light`.
pub fn read_hier_manifest(path: &Path) -> Result<Vec<HierRecord>, ProtocolError> {
    let mut reader = open(path, HIER_HEADER)?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<HierRow>().enumerate() {
        let row = row.map_err(|e| manifest_error(path, e))?;
        let label = row
            .hier_label
            .parse()
            .map_err(|e| manifest_error(path, format!("row {}: {e}", line + 2)))?;
        out.push(HierRecord {
            path: resolve(path, &row.path),
            id: row.id,
            label,
        });
    }
    check_unique_ids(out.iter().map(|s| s.id.as_str()))?;
    Ok(out)
}

/// Writes `id,path,label` rows in the given order.
pub fn write_binary_manifest<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a str, bool)>,
) -> Result<(), ProtocolError> {
    let io = |e: csv::Error| manifest_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for (id, p, label) in rows {
        w.serialize(BinaryRow {
            id: id.to_string(),
            path: p.to_string(),
            label: u8::from(label),
        })
        .map_err(io)?;
    }
    w.flush().map_err(|source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    })
}
