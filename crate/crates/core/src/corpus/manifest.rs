//! Manifest ingestion.
//!
//! A manifest is NDJSON: one capture point per line. Malformed lines are
//! skipped with a diagnostic; an unreadable file is fatal.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::Deserialize;

use super::{CapturePoint, CorpusError};

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    lat: f64,
    lon: f64,
    timestamp: String,
    image_uri: String,
    #[serde(default)]
    heading: f64,
}

/// A skipped manifest line and why it was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based line number in the manifest file.
    pub line_no: usize,
    pub reason: String,
}

/// Result of reading a manifest: the valid points plus per-line diagnostics.
#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub points: Vec<CapturePoint>,
    pub rejects: Vec<RejectedLine>,
}

/// Read `path` as an NDJSON manifest of capture points.
///
/// Every syntactically valid record is loaded; bad lines (unparseable JSON,
/// out-of-range coordinates, bad timestamps, duplicate ids) are recorded in
/// [`IngestOutcome::rejects`] and skipped. Headings are normalized into
/// `[0, 360)`.
pub fn ingest_manifest(path: &Path) -> Result<IngestOutcome, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut outcome = IngestOutcome::default();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, &mut seen_ids) {
            Ok(point) => outcome.points.push(point),
            Err(reason) => outcome.rejects.push(RejectedLine { line_no, reason }),
        }
    }
    Ok(outcome)
}

fn parse_line(line: &str, seen_ids: &mut HashSet<String>) -> Result<CapturePoint, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("bad json: {e}"))?;
    if raw.id.is_empty() {
        return Err("empty id".into());
    }
    if !(-90.0..=90.0).contains(&raw.lat) || !raw.lat.is_finite() {
        return Err(format!("latitude out of range: {}", raw.lat));
    }
    if !(-180.0..=180.0).contains(&raw.lon) || !raw.lon.is_finite() {
        return Err(format!("longitude out of range: {}", raw.lon));
    }
    if !raw.heading.is_finite() {
        return Err(format!("heading not finite: {}", raw.heading));
    }
    let timestamp: DateTime<Utc> = raw
        .timestamp
        .parse::<DateTime<Utc>>()
        .map_err(|e| format!("bad timestamp {:?}: {e}", raw.timestamp))?;
    if raw.image_uri.is_empty() {
        return Err("empty image_uri".into());
    }
    if !seen_ids.insert(raw.id.clone()) {
        return Err(format!("duplicate id {:?}", raw.id));
    }
    Ok(CapturePoint {
        id: raw.id,
        lat: raw.lat,
        lon: raw.lon,
        timestamp,
        image_uri: raw.image_uri,
        heading: raw.heading.rem_euclid(360.0),
    })
}
