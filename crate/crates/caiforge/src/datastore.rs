//! Versioned line-delimited JSON persistence with schema checks and content hashing.
//!
//! Every dataset file starts with a single header line followed by one canonical
//! JSON record per line. The header pins the schema name/version and a SHA-256
//! hash over the record lines, so readers can detect truncation and tampering.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum DatastoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index} failed validation: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("line {line}: malformed JSON: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("schema mismatch: expected {expected}, file has {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("schema version {found} is newer than supported version {supported} for {schema}")]
    UnsupportedVersion {
        schema: String,
        found: u32,
        supported: u32,
    },
    #[error("content hash mismatch: header {expected}, computed {computed}")]
    HashMismatch { expected: String, computed: String },
}

/// First line of every dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetHeader {
    pub schema_name: String,
    pub schema_version: u32,
    pub created_at: String,
    pub producer: Producer,
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Producer {
    pub module: String,
    pub config_digest: String,
}

impl DatasetHeader {
    pub fn new(schema: &Schema, created_at: &str, module: &str, config_digest: &str) -> Self {
        Self {
            schema_name: schema.name.to_string(),
            schema_version: schema.version,
            created_at: created_at.to_string(),
            producer: Producer {
                module: module.to_string(),
                config_digest: config_digest.to_string(),
            },
            content_hash: String::new(),
        }
    }
}

/// A named, versioned record schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub version: u32,
}

pub const SCHEMA_RED_TEAM_PROMPTS: Schema = Schema { name: "red_team_prompts", version: 1 };
pub const SCHEMA_SFT_RECORDS: Schema = Schema { name: "sft_records", version: 1 };
pub const SCHEMA_SFT_EXPORT: Schema = Schema { name: "sft_export", version: 1 };
pub const SCHEMA_PREFERENCE_PAIRS: Schema = Schema { name: "preference_pairs", version: 1 };
pub const SCHEMA_DPO_METRICS: Schema = Schema { name: "dpo_metrics", version: 1 };
pub const SCHEMA_EVAL_QUESTIONS: Schema = Schema { name: "eval_questions", version: 1 };

/// Serialize a JSON value with object keys sorted recursively and no
/// insignificant whitespace. This is the byte form used for hashing.
pub fn canonical_json(value: &Value) -> String {
    fn canonicalize(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let sorted: BTreeMap<_, _> =
                    map.iter().map(|(k, v)| (k.clone(), canonicalize(v))).collect();
                Value::Object(sorted.into_iter().collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&canonicalize(value)).expect("canonical JSON serialization")
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Hash over canonical record lines in order, one line feed after each.
pub fn content_hash_of_lines(lines: &[String]) -> String {
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Derive a 32-byte RNG seed from a run seed and a stable record key.
/// Subsets of a corpus reproduce identical per-record streams.
pub fn derive_seed(run_seed: u64, key: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(key.as_bytes());
    hasher.finalize().into()
}

/// Fold a 32-byte seed down to a u64 (little-endian prefix).
pub fn seed_to_u64(seed: [u8; 32]) -> u64 {
    u64::from_le_bytes(seed[..8].try_into().expect("8-byte prefix"))
}

fn record_lines<T: Serialize + DeserializeOwned>(
    records: &[T],
) -> Result<Vec<String>, DatastoreError> {
    records
        .iter()
        .enumerate()
        .map(|(index, record)| {
            let value = serde_json::to_value(record).map_err(|e| DatastoreError::InvalidRecord {
                index,
                reason: e.to_string(),
            })?;
            let line = canonical_json(&value);
            // records must survive their own serialization; this catches
            // non-finite floats degraded to null and similar lossy cases
            serde_json::from_str::<T>(&line).map_err(|e| DatastoreError::InvalidRecord {
                index,
                reason: e.to_string(),
            })?;
            Ok(line)
        })
        .collect()
}

/// Write a dataset atomically: temp file in the same directory, then rename.
/// Returns the content hash recorded in the header.
pub fn write_dataset<T: Serialize + DeserializeOwned>(
    path: &Path,
    mut header: DatasetHeader,
    records: &[T],
) -> Result<String, DatastoreError> {
    let lines = record_lines(records)?;
    let hash = content_hash_of_lines(&lines);
    header.content_hash = hash.clone();

    let header_line = canonical_json(
        &serde_json::to_value(&header).expect("header serializes"),
    );

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|source| DatastoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(|source| DatastoreError::Io {
            path: tmp.clone(),
            source,
        })?;
        let io_err = |source| DatastoreError::Io { path: tmp.clone(), source };
        file.write_all(header_line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
        for line in &lines {
            file.write_all(line.as_bytes()).map_err(io_err)?;
            file.write_all(b"\n").map_err(io_err)?;
        }
        file.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(|source| DatastoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hash)
}

/// Read a dataset, checking schema and re-verifying the content hash before
/// any record is handed back.
pub fn read_dataset<T: DeserializeOwned>(
    path: &Path,
    expected: Schema,
) -> Result<(DatasetHeader, Vec<T>), DatastoreError> {
    let file = fs::File::open(path).map_err(|source| DatastoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header_line = match lines.next() {
        Some((_, Ok(line))) => line,
        Some((_, Err(source))) => {
            return Err(DatastoreError::Io { path: path.to_path_buf(), source })
        }
        None => return Err(DatastoreError::MissingHeader),
    };
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| DatastoreError::MalformedLine {
            line: 1,
            reason: format!("header: {e}"),
        })?;
    if header.schema_name != expected.name {
        return Err(DatastoreError::SchemaMismatch {
            expected: expected.name.to_string(),
            found: header.schema_name,
        });
    }
    if header.schema_version > expected.version {
        return Err(DatastoreError::UnsupportedVersion {
            schema: header.schema_name,
            found: header.schema_version,
            supported: expected.version,
        });
    }

    let mut raw_lines = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| DatastoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let number = idx + 1;
        let value: Value = serde_json::from_str(&line).map_err(|e| DatastoreError::MalformedLine {
            line: number,
            reason: e.to_string(),
        })?;
        raw_lines.push((number, value));
    }

    let canon: Vec<String> = raw_lines.iter().map(|(_, v)| canonical_json(v)).collect();
    let computed = content_hash_of_lines(&canon);
    if computed != header.content_hash {
        return Err(DatastoreError::HashMismatch {
            expected: header.content_hash,
            computed,
        });
    }

    let mut records = Vec::with_capacity(raw_lines.len());
    for (number, value) in raw_lines {
        let record: T =
            serde_json::from_value(value).map_err(|e| DatastoreError::MalformedLine {
                line: number,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok((header, records))
}

/// Atomic write of a single pretty-printed JSON document (reports, configs).
pub fn write_json_doc<T: Serialize>(path: &Path, value: &T) -> Result<(), DatastoreError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DatastoreError::InvalidRecord {
        index: 0,
        reason: e.to_string(),
    })?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text.as_bytes()).map_err(|source| DatastoreError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| DatastoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read newline-delimited JSON without a dataset header (external inputs such
/// as prompt corpora authored by hand).
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatastoreError> {
    let file = fs::File::open(path).map_err(|source| DatastoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_jsonl_from(BufReader::new(file), path)
}

pub fn read_jsonl_from<T: DeserializeOwned, R: BufRead>(
    reader: R,
    path: &Path,
) -> Result<Vec<T>, DatastoreError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatastoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| DatastoreError::MalformedLine {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: String,
        n: u32,
    }

    fn rows() -> Vec<Row> {
        (0..3).map(|n| Row { id: format!("r{n}"), n }).collect()
    }

    fn header() -> DatasetHeader {
        DatasetHeader::new(&SCHEMA_RED_TEAM_PROMPTS, "2026-01-01T00:00:00Z", "test", "digest")
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: Value = serde_json::from_str(r#"{"b":1,"a":{"z":2,"y":[3,{"q":4,"p":5}]}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"y":[3,{"p":5,"q":4}],"z":2},"b":1}"#);
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let hash = write_dataset(&path, header(), &rows()).unwrap();
        let (hdr, back): (_, Vec<Row>) = read_dataset(&path, SCHEMA_RED_TEAM_PROMPTS).unwrap();
        assert_eq!(back, rows());
        assert_eq!(hdr.content_hash, hash);
        // 1 header + 3 records
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn identical_content_hashes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_dataset(&dir.path().join("a.jsonl"), header(), &rows()).unwrap();
        let b = write_dataset(&dir.path().join("b.jsonl"), header(), &rows()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_line_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&path, header(), &rows()).unwrap();
        let tampered = fs::read_to_string(&path).unwrap().replace("\"n\":1", "\"n\":9");
        fs::write(&path, tampered).unwrap();
        let err = read_dataset::<Row>(&path, SCHEMA_RED_TEAM_PROMPTS).unwrap_err();
        assert!(matches!(err, DatastoreError::HashMismatch { .. }));
    }

    #[test]
    fn newer_schema_version_is_rejected_before_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut hdr = header();
        hdr.schema_version = 99;
        write_dataset(&path, hdr, &rows()).unwrap();
        let err = read_dataset::<Row>(&path, SCHEMA_RED_TEAM_PROMPTS).unwrap_err();
        assert!(matches!(err, DatastoreError::UnsupportedVersion { found: 99, .. }));
    }

    #[test]
    fn wrong_schema_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&path, header(), &rows()).unwrap();
        let err = read_dataset::<Row>(&path, SCHEMA_SFT_RECORDS).unwrap_err();
        assert!(matches!(err, DatastoreError::SchemaMismatch { .. }));
    }

    #[test]
    fn failed_write_leaves_no_file() {
        // NaN degrades to null in JSON and must be caught as invalid, with
        // the record index and no file left behind.
        #[derive(Serialize, Deserialize)]
        struct Bad {
            f: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let err = write_dataset(&path, header(), &[Bad { f: f64::NAN }]).unwrap_err();
        assert!(matches!(err, DatastoreError::InvalidRecord { index: 0, .. }));
        assert!(!path.exists());
    }

    #[test]
    fn record_missing_required_field_names_the_line() {
        // hand-build a file whose second record lacks `n`
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let lines = vec![r#"{"id":"a","n":1}"#.to_string(), r#"{"id":"b"}"#.to_string()];
        let mut hdr = header();
        hdr.content_hash = content_hash_of_lines(&lines);
        let header_line = canonical_json(&serde_json::to_value(&hdr).unwrap());
        fs::write(&path, format!("{header_line}\n{}\n{}\n", lines[0], lines[1])).unwrap();
        let err = read_dataset::<Row>(&path, SCHEMA_RED_TEAM_PROMPTS).unwrap_err();
        match err {
            DatastoreError::MalformedLine { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("n"), "reason {reason:?} should name the field");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn derive_seed_is_stable_and_key_sensitive() {
        assert_eq!(derive_seed(7, "p1"), derive_seed(7, "p1"));
        assert_ne!(derive_seed(7, "p1"), derive_seed(7, "p2"));
        assert_ne!(derive_seed(7, "p1"), derive_seed(8, "p1"));
    }
}
