//! Artifact I/O: atomic file writes and JSONL helpers.
//!
//! All artifacts are written atomically (temp file + rename) so interrupted
//! runs never leave half-written files, and all writers are byte-deterministic
//! given the same inputs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid record: {message}")]
    Record { path: PathBuf, line: usize, message: String },
}

impl IoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io { path: path.into(), source }
    }

    pub fn record(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        IoError::Record { path: path.into(), line, message: message.into() }
    }
}

/// Write `contents` to `path` atomically: write a sibling temp file, then
/// rename over the destination.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| IoError::io(path, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| {
            IoError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name"))
        })?
        .to_owned();
    let mut tmp_name = file_name;
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
    file.write_all(contents).map_err(|e| IoError::io(&tmp, e))?;
    file.sync_all().map_err(|e| IoError::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))?;
    Ok(())
}

/// Serialize items one-per-line and write the file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let mut out = Vec::new();
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| IoError::record(path, 0, format!("serialization failed: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

/// Read a JSONL file into a vector, reporting the 1-based line of the first
/// malformed record. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line)
            .map_err(|e| IoError::record(path, idx + 1, e.to_string()))?;
        items.push(item);
    }
    Ok(items)
}

/// Serialize a value as pretty JSON with a trailing newline and write it
/// atomically.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::record(path, 0, format!("serialization failed: {e}")))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Read and deserialize a JSON file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::record(path, 0, e.to_string()))
}
