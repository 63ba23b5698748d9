//! Homogeneous record files in two layouts: a JSON document
//! (`{"kind": ..., "records": [...]}`) and a CSV table with a fixed header.
//!
//! Floats are written at 6 significant digits through the `util::sig6` serde
//! adapters on each record type, so identical inputs give identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A persisted, homogeneous row type.
pub trait Record: Serialize + DeserializeOwned {
    /// Document kind tag for the JSON layout.
    const KIND: &'static str;
    /// CSV header, in field declaration order. Empty for non-tabular records.
    const COLUMNS: &'static [&'static str];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// Structured text (JSON).
    Json,
    /// Delimited table (CSV).
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

#[derive(Serialize)]
struct DocOut<'a, T> {
    kind: &'a str,
    records: &'a [T],
}

#[derive(Deserialize)]
struct DocIn<T> {
    kind: String,
    records: Vec<T>,
}

pub fn to_bytes<T: Record>(records: &[T], format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(&DocOut { kind: T::KIND, records })
                .map_err(|e| serialize_error(T::KIND, e))?;
            out.push(b'\n');
            Ok(out)
        }
        Format::Csv => {
            if T::COLUMNS.is_empty() {
                return Err(Error::Invalid(format!("{} records are not tabular", T::KIND)));
            }
            let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            writer
                .write_record(T::COLUMNS)
                .map_err(|e| serialize_error(T::KIND, e))?;
            for r in records {
                writer.serialize(r).map_err(|e| serialize_error(T::KIND, e))?;
            }
            writer
                .into_inner()
                .map_err(|e| Error::Invalid(format!("csv flush: {e}")))
        }
    }
}

fn serialize_error(kind: &str, e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    if msg.contains("non-finite") {
        Error::NonFinite(format!("{kind}: {msg}"))
    } else {
        Error::Invalid(format!("serializing {kind}: {msg}"))
    }
}

pub fn from_bytes<T: Record>(bytes: &[u8], format: Format, location: &str) -> Result<Vec<T>> {
    match format {
        Format::Json => {
            let doc: DocIn<T> = serde_json::from_slice(bytes)
                .map_err(|e| Error::parse(format!("{location}:{}:{}", e.line(), e.column()), e))?;
            if doc.kind != T::KIND {
                return Err(Error::parse(
                    location,
                    format!("expected kind {:?}, found {:?}", T::KIND, doc.kind),
                ));
            }
            Ok(doc.records)
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new().from_reader(bytes);
            let header = reader
                .headers()
                .map_err(|e| Error::parse(location, e))?
                .clone();
            if header.iter().ne(T::COLUMNS.iter().copied()) {
                return Err(Error::parse(
                    format!("{location}:1"),
                    format!("header {:?} does not match {:?}", header, T::COLUMNS),
                ));
            }
            reader
                .deserialize()
                .enumerate()
                .map(|(i, r)| r.map_err(|e| Error::parse(format!("{location}:{}", i + 2), e)))
                .collect()
        }
    }
}

/// Atomically writes `records` to `path` (temp file + rename).
pub fn write_records<T: Record>(records: &[T], path: &Path, format: Format) -> Result<()> {
    let bytes = to_bytes(records, format)?;
    write_atomic(path, &bytes)
}

pub fn read_records<T: Record>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, Format::from_path(path), &path.display().to_string())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
