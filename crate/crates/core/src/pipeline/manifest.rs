//! `manifest.jsonl`: one JSON object per emitted variant, rewritten atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TransformPlan;
use crate::screening::ScreeningReport;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pending,
    Accepted,
    Rejected,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pending => "pending",
            Verdict::Accepted => "accepted",
            Verdict::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Position in the manifest.
    pub id: usize,
    pub source_image: String,
    pub source_annotation: String,
    pub variant_index: u32,
    /// Output paths, relative to the manifest's directory.
    pub image: String,
    pub annotation: String,
    pub obb: String,
    pub plan: TransformPlan,
    pub screening: ScreeningReport,
    /// Flattened screening flag names, for quick filtering.
    pub flags: Vec<String>,
    pub nonconverged_fraction: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewed_at: Option<String>,
}

impl ManifestEntry {
    pub fn is_flagged(&self) -> bool {
        self.screening.is_flagged()
    }
}

/// One review event, appended to the audit log next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: usize,
    pub previous: Verdict,
    pub decision: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub timestamp: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn audit_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest");
    manifest.with_file_name(format!("{stem}.audit.jsonl"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn to_jsonl(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| ManifestError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_jsonl(&text, path)
}

/// Writes `contents` to a sibling temp file, syncs it and renames it over
/// `path`, so readers see either the old or the new file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ManifestError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(contents).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io(path))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    write_atomic(path, to_jsonl(entries).as_bytes())
}

/// Merges `new` into the manifest at `path`. An entry whose image path is
/// already listed replaces the old one in place; it keeps the old review
/// state only when its plan is unchanged. Other entries are appended with
/// ids that follow on. Returns the full manifest as written.
pub fn merge_entries(
    path: &Path,
    new: Vec<ManifestEntry>,
) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut all = if path.exists() {
        read_manifest(path)?
    } else {
        Vec::new()
    };
    for mut e in new {
        match all.iter_mut().find(|old| old.image == e.image) {
            Some(old) => {
                e.id = old.id;
                if old.plan == e.plan {
                    e.verdict = old.verdict;
                    e.note = old.note.take();
                    e.reviewed_at = old.reviewed_at.take();
                }
                *old = e;
            }
            None => {
                e.id = all.len();
                all.push(e);
            }
        }
    }
    write_manifest(path, &all)?;
    Ok(all)
}

pub fn append_audit(manifest: &Path, record: &AuditRecord) -> Result<(), ManifestError> {
    let path = audit_path(manifest);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io(&path))?;
    let mut line = serde_json::to_string(record).expect("audit records serialize");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io(&path))?;
    f.sync_data().map_err(io(&path))
}

pub fn read_audit(manifest: &Path) -> Result<Vec<AuditRecord>, ManifestError> {
    let path = audit_path(manifest);
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| ManifestError::Json {
                path: path.clone(),
                line: i + 1,
                source,
            })
        })
        .collect()
}
