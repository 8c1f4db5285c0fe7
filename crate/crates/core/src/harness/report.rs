use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::eval::EvalReport;

/// Hex SHA-256 of the canonical JSON form (declaration field order).
pub fn config_digest<T: Serialize>(cfg: &T) -> crate::Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> crate::Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> crate::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_jsonl(items)?.as_bytes())?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> crate::Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `row,pass1` table: fixed patterns, then adaptive, then the oracle.
pub fn eval_rows_csv(report: &EvalReport) -> String {
    let mut s = String::from("row,pass1\n");
    for f in &report.fixed {
        let _ = writeln!(s, "{},{}", f.pattern, f.pass1);
    }
    let _ = writeln!(s, "adaptive,{}", report.pass1);
    let _ = writeln!(s, "oracle,{}", report.oracle);
    s
}
