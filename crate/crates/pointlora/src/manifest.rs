//! Dataset manifests: `<relative-path>,<label>` per line.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pointlora_core::geometry::PointCloud;

use crate::error::{Error, Result};
use crate::xyz::load_point_cloud_file;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 2 {
            return Err(bad(format!("expected `<path>,<label>`, found {} fields", record.len())));
        }
        let rel = &record[0];
        let label = record[1]
            .parse::<usize>()
            .map_err(|_| bad(format!("label {:?} is not a non-negative integer", &record[1])))?;
        if !seen.insert(rel.to_string()) {
            return Err(Error::Schema(format!(
                "{}:{line}: duplicate path {rel:?}",
                path.display()
            )));
        }
        entries.push(ManifestEntry {
            path: base.join(rel),
            label,
        });
    }
    if entries.is_empty() {
        return Err(Error::Contract(format!("manifest {} is empty", path.display())));
    }
    Ok(entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Manifest plus every referenced cloud, labeled.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PointCloud>> {
    load_manifest(path)?
        .into_iter()
        .map(|e| Ok(load_point_cloud_file(&e.path)?.with_label(e.label)))
        .collect()
}
