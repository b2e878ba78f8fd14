//! Stage artifact files: JSONL with a leading header record, and JSON documents.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ArtifactError {
    ArtifactError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Provenance record written at the top of every stage output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub tool_version: String,
    pub stage: String,
    /// Hash of the stage parameters; never includes the timestamp.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub timestamp: String,
}

impl ArtifactHeader {
    pub fn new(stage: &str, params: &impl Serialize, seed: Option<u64>, timestamp: &str) -> Self {
        ArtifactHeader {
            tool_version: TOOL_VERSION.to_string(),
            stage: stage.to_string(),
            config_hash: config_hash(params),
            seed,
            timestamp: timestamp.to_string(),
        }
    }
}

/// Hex SHA-256 of the compact JSON encoding of `params`.
pub fn config_hash(params: &impl Serialize) -> String {
    let json = serde_json::to_string(params).expect("stage parameters serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// RFC 3339 UTC timestamp, honouring `SOURCE_DATE_EPOCH` when set.
pub fn current_timestamp() -> String {
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok());
    let at: DateTime<Utc> = match epoch.and_then(|s| DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => Utc::now(),
    };
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ArtifactHeader,
}

fn ensure_parent(path: &Path) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(())
}

/// Serializes a header line followed by one line per row.
pub fn jsonl_string<T: Serialize>(header: Option<&ArtifactHeader>, rows: &[T]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&serde_json::to_string(&HeaderLine { header: h.clone() }).expect("header serializes"));
        out.push('\n');
    }
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Writes atomically via a temporary sibling file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), ArtifactError> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp-write");
    {
        let file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(contents.as_bytes()).map_err(|e| io_err(&tmp, e))?;
        w.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    header: Option<&ArtifactHeader>,
    rows: &[T],
) -> Result<(), ArtifactError> {
    write_atomic(path, &jsonl_string(header, rows))
}

/// Parses JSONL text; a first line of the form `{"header": ...}` is split off.
pub fn parse_jsonl<T: DeserializeOwned>(
    text: &str,
    origin: &str,
) -> Result<(Option<ArtifactHeader>, Vec<T>), ArtifactError> {
    let mut header = None;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(line) {
                header = Some(h.header);
                continue;
            }
        }
        let row = serde_json::from_str(line).map_err(|e| ArtifactError::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<ArtifactHeader>, Vec<T>), ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Drops the header line of a JSONL artifact (or the `header` key of a JSON
/// object) so two runs can be compared byte-for-byte.
pub fn strip_header(text: &str) -> String {
    if let Ok(Value::Object(mut map)) = serde_json::from_str::<Value>(text) {
        if map.remove("header").is_some() {
            return serde_json::to_string_pretty(&Value::Object(map)).expect("json serializes");
        }
    }
    let mut lines = text.lines();
    let first = lines.next();
    match first {
        Some(l) if serde_json::from_str::<HeaderLine>(l).is_ok() => lines.map(|l| format!("{l}\n")).collect(),
        _ => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
        text: String,
    }

    #[test]
    fn jsonl_round_trip_with_header() {
        let header = ArtifactHeader::new("sample", &("cfg", 3), Some(17), "2024-01-01T00:00:00Z");
        let rows = vec![
            Row {
                id: 1,
                text: "a\nb".into(),
            },
            Row {
                id: 2,
                text: "c".into(),
            },
        ];
        let text = jsonl_string(Some(&header), &rows);
        let (h, back): (_, Vec<Row>) = parse_jsonl(&text, "mem").unwrap();
        assert_eq!(h, Some(header));
        assert_eq!(back, rows);
        assert_eq!(strip_header(&text), jsonl_string::<Row>(None, &rows));
    }

    #[test]
    fn config_hash_ignores_timestamp() {
        let a = ArtifactHeader::new("run", &"p", None, "2024-01-01T00:00:00Z");
        let b = ArtifactHeader::new("run", &"p", None, "2025-01-01T00:00:00Z");
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, ArtifactHeader::new("run", &"q", None, "x").config_hash);
    }

    #[test]
    fn parse_error_names_line() {
        let err = parse_jsonl::<Row>("{\"id\":1,\"text\":\"a\"}\nnot json\n", "f.jsonl").unwrap_err();
        assert!(matches!(err, ArtifactError::Parse { line: 2, .. }));
    }
}
