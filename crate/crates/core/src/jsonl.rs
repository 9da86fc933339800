//! Line-oriented JSON helpers shared by the file formats.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// One parsed line, with its 1-based line number.
pub struct Line<T> {
    pub number: usize,
    pub value: T,
}

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed JSON on line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

/// Parses every non-blank line of `text`.
pub fn parse_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<Line<T>>, JsonlError> {
    let mut out = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(raw).map_err(|e| JsonlError::MalformedLine {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(Line {
            number: idx + 1,
            value,
        });
    }
    Ok(out)
}

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<Line<T>>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_lines(&text)
}

/// Serializes each record on its own `\n`-terminated line.
pub fn to_string<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(to_string(records).as_bytes()).map_err(io_err)?;
    Ok(())
}
