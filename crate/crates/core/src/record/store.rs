//! On-disk dataset layout: one directory holding WFDB record pairs plus a
//! `labels.csv` manifest with columns `record_id,class_code,source`.

use std::fs;
use std::path::{Path, PathBuf};

use super::wfdb::{read_wfdb_labeled, safe_gain, write_wfdb};
use super::{Dataset, RhythmClass, Source};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "labels.csv";
pub const MANIFEST_HEADER: &str = "record_id,class_code,source";
pub const DEFAULT_GAIN: f64 = 1000.0;

/// One row of the label manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub record_id: String,
    pub class: RhythmClass,
    pub source: Source,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header {MANIFEST_HEADER:?}"),
            })
        }
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, got {}", cols.len())));
        }
        rows.push(ManifestRow {
            record_id: cols[0].to_string(),
            class: cols[1].parse().map_err(|e: Error| err(e.to_string()))?,
            source: cols[2].parse().map_err(|e: Error| err(e.to_string()))?,
        });
    }
    Ok(rows)
}

pub fn render_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.record_id, r.class.code(), r.source.tag()));
    }
    out
}

/// Writes every record plus the manifest. Each record gets the largest gain
/// up to `DEFAULT_GAIN` that fits int16.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    let mut rows = Vec::with_capacity(ds.len());
    for rec in ds.records() {
        write_wfdb(rec, safe_gain(&rec.signal, DEFAULT_GAIN), dir)?;
        rows.push(ManifestRow {
            record_id: rec.record_id.clone(),
            class: rec.label,
            source: rec.source,
        });
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, render_manifest(&rows)).io_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Loads the records listed in `manifest` from `wfdb_dir`.
pub fn load_with_manifest(manifest: &Path, wfdb_dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).io_context(|| format!("reading {}", manifest.display()))?;
    let rows = parse_manifest(&text, manifest)?;
    let records = rows
        .iter()
        .map(|row| {
            let mut rec = read_wfdb_labeled(&wfdb_dir.join(format!("{}.hea", row.record_id)), row.class, row.source)?;
            rec.record_id = row.record_id.clone();
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_with_manifest(&dir.join(MANIFEST), dir)
}
