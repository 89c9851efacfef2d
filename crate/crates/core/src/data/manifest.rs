use std::fs;
use std::path::{Path, PathBuf};

use super::{read_wav, LabeledClip};
use crate::error::{Error, Result};

/// One manifest record: `path<TAB>label<TAB>speaker`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: usize,
    pub speaker: String,
}

/// Parses a tab-separated manifest. Relative paths resolve against the
/// manifest's directory; label names map to their index in `classes`.
pub fn read_manifest(path: &Path, classes: &[String]) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [file, label, speaker] = fields[..] else {
            return Err(Error::Config(format!(
                "{}:{}: expected 3 tab-separated fields, found {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        };
        let label = classes.iter().position(|c| c == label).ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: label `{label}` is not in the class list {classes:?}",
                path.display(),
                n + 1
            ))
        })?;
        rows.push(ManifestRow {
            path: base.join(file),
            label,
            speaker: speaker.to_string(),
        });
    }
    Ok(rows)
}

/// Reads one WAV file, taking its label and speaker from `rows`.
pub fn ingest_wav(path: &Path, rows: &[ManifestRow]) -> Result<LabeledClip> {
    let row = rows
        .iter()
        .find(|r| r.path == path)
        .ok_or_else(|| Error::MissingManifestRow(path.to_path_buf()))?;
    let (samples, sample_rate) = read_wav(path)?;
    Ok(LabeledClip {
        samples,
        sample_rate,
        label: row.label,
        speaker: row.speaker.clone(),
    })
}

/// Every clip listed in a manifest.
pub fn ingest_manifest(path: &Path, classes: &[String]) -> Result<Vec<LabeledClip>> {
    let rows = read_manifest(path, classes)?;
    rows.iter().map(|r| ingest_wav(&r.path, &rows)).collect()
}
