//! Newline-delimited record stores, checkpoints, and stage stamps.
//!
//! Every persistent artifact in the pipeline is a UTF-8 file with one JSON
//! object per line. Finalized stores are written atomically (temp file +
//! rename) and in a canonical order so that identical runs produce identical
//! bytes.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad record at {path}:{line}: {source}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.to_path_buf(), source }
}

/// Read all records from a newline-delimited JSON file.
pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| StoreError::BadRecord {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Write records as newline-delimited JSON, atomically replacing `path`.
pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for rec in records {
            let line = serde_json::to_string(rec).expect("record serializes");
            w.write_all(line.as_bytes()).map_err(|e| io_err(&tmp, e))?;
            w.write_all(b"\n").map_err(|e| io_err(&tmp, e))?;
        }
        let file = w.into_inner().map_err(|e| io_err(&tmp, e.into()))?;
        file.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Append-only writer for shard files that are merged at run end.
pub struct NdjsonAppender {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl NdjsonAppender {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self { path: path.to_path_buf(), writer: BufWriter::new(file) })
    }

    pub fn append<T: Serialize>(&mut self, rec: &T) -> Result<(), StoreError> {
        let line = serde_json::to_string(rec).expect("record serializes");
        self.writer.write_all(line.as_bytes()).map_err(|e| io_err(&self.path, e))?;
        self.writer.write_all(b"\n").map_err(|e| io_err(&self.path, e))?;
        Ok(())
    }

    /// Flush buffered records and sync file data to disk.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.writer.flush().map_err(|e| io_err(&self.path, e))?;
        self.writer.get_ref().sync_data().map_err(|e| io_err(&self.path, e))?;
        Ok(())
    }
}

/// Set of completed work-unit ids, persisted one id per line.
///
/// Appends are synced per batch so an interrupted run resumes from the last
/// known-complete unit.
pub struct Checkpoint {
    done: BTreeSet<String>,
    appender: NdjsonAppender,
}

impl Checkpoint {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let done = if path.exists() {
            read_ndjson::<String>(path)?.into_iter().collect()
        } else {
            BTreeSet::new()
        };
        Ok(Self { done, appender: NdjsonAppender::open(path)? })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.done.contains(id)
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    /// Mark a batch of ids complete and sync to disk.
    pub fn commit_batch<I: IntoIterator<Item = String>>(&mut self, ids: I) -> Result<(), StoreError> {
        for id in ids {
            if self.done.insert(id.clone()) {
                self.appender.append(&id)?;
            }
        }
        self.appender.sync()
    }
}

/// Content hash over stage parameters and input files, used to detect that a
/// command can be skipped on re-run.
pub fn stage_fingerprint(
    stage: &str,
    params_json: &str,
    inputs: &[&Path],
) -> Result<String, StoreError> {
    let mut hasher = Sha256::new();
    hasher.update(stage.as_bytes());
    hasher.update([0u8]);
    hasher.update(params_json.as_bytes());
    for path in inputs {
        hasher.update([0u8]);
        hasher.update(path.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub fingerprint: String,
    pub outputs: Vec<PathBuf>,
}

impl StageStamp {
    pub fn path_for(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}.stamp.json"))
    }

    pub fn load(dir: &Path, stage: &str) -> Option<StageStamp> {
        let text = fs::read_to_string(Self::path_for(dir, stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// True when the stored fingerprint matches and every output still exists.
    pub fn is_current(&self, fingerprint: &str) -> bool {
        self.fingerprint == fingerprint && self.outputs.iter().all(|p| p.exists())
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = Self::path_for(dir, &self.stage);
        let text = serde_json::to_string_pretty(self).expect("stamp serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

/// Stable 128-bit hex id from a list of key parts.
pub fn stable_id(kind: &str, parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    for part in parts {
        hasher.update([0u8]);
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}
