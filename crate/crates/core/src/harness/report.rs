use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-query attention error, one row per evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnErrorRow {
    pub schema_version: u32,
    pub query: usize,
    pub method: String,
    pub budget: usize,
    pub n_selected: usize,
    pub recall: f64,
    pub rel_error: f64,
}

/// Mean top-k cosine between queries and keys under three embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub schema_version: u32,
    pub k: usize,
    pub raw: f64,
    pub tanh: f64,
    pub sign: f64,
}

/// Loss of one optimizer step, measured before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub schema_version: u32,
    pub step: usize,
    pub loss: f64,
}

pub fn write_csv<W: Write, S: Serialize>(w: W, rows: &[S]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, D: DeserializeOwned>(r: R) -> Result<Vec<D>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Into::into))
        .collect()
}

/// Writes JSON when `path` ends in `.json`, CSV otherwise.
pub fn write_report<S: Serialize>(path: impl AsRef<Path>, rows: &[S]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::to_writer_pretty(file, rows)?;
        Ok(())
    } else {
        write_csv(file, rows)
    }
}
