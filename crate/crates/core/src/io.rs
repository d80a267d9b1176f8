//! File helpers shared by every artifact writer.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what,
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// One header line followed by one line per record.
pub fn write_jsonl<H: Serialize, R: Serialize>(path: &Path, header: &H, records: &[R]) -> Result<()> {
    let mut out = serde_json::to_string(header).expect("serializable header");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<H: DeserializeOwned, R: DeserializeOwned>(path: &Path, what: &'static str) -> Result<(H, Vec<R>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Format {
        what,
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_str(&header_line).map_err(|e| bad(1, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?);
    }
    Ok((header, records))
}
