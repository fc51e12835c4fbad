//! Line-delimited JSON record files with a versioned header line.
//!
//! Every file starts with `{"schema": <name>, "version": <n>, "meta": {...}}`
//! followed by one JSON object per line. Readers reject a header naming a
//! different schema or version and report malformed lines by number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Header {
    pub fn new(schema: &str, version: u32, meta: serde_json::Value) -> Self {
        Self {
            schema: schema.to_string(),
            version,
            meta,
        }
    }
}

/// Serializes header and records to a string, one JSON document per line.
pub fn to_string<T: Serialize>(header: &Header, records: &[T]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a record file, checking the header against `schema` and `version`.
pub fn read<T: DeserializeOwned>(path: &Path, schema: &str, version: u32) -> Result<(Header, Vec<T>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("bad header: {e}"),
            })?
        }
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty file, expected header".into(),
            })
        }
    };
    if header.schema != schema || header.version != version {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            expected: schema.to_string(),
            expected_version: version,
            found: format!("{} v{}", header.schema, header.version),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        a: u32,
        b: f64,
    }

    #[test]
    fn corrupt_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(
            &p,
            "{\"schema\":\"t\",\"version\":1}\n{\"a\":1,\"b\":0.5}\n{\"a\":oops}\n",
        )
        .unwrap();
        match read::<Rec>(&p, "t", 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write::<Rec>(&p, &Header::new("t", 2, serde_json::Value::Null), &[]).unwrap();
        assert!(matches!(read::<Rec>(&p, "t", 1), Err(Error::Schema { .. })));
    }

    #[test]
    fn floats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let recs: Vec<Rec> = (0..200)
            .map(|i| Rec {
                a: i,
                b: (i as f64 * 0.1).sin() / 3.0 + 1e-300 * i as f64,
            })
            .collect();
        write(&p, &Header::new("t", 1, serde_json::Value::Null), &recs).unwrap();
        let (_, back) = read::<Rec>(&p, "t", 1).unwrap();
        assert_eq!(recs, back);
    }
}
