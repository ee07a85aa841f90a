//! Long-format CSV rows, JSON summaries and the run manifest. Every file is
//! written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const CSV_HEADER: [&str; 5] = ["experiment", "key", "coord", "value", "error"];

/// One measured value. `coord` is the sweep coordinate (t, n or λ depending
/// on the key); `error` is a standard error or tolerance when one exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub key: String,
    pub coord: Option<f64>,
    pub value: f64,
    pub error: Option<f64>,
}

impl Row {
    pub fn new(key: impl Into<String>, coord: Option<f64>, value: f64, error: Option<f64>) -> Self {
        Self {
            key: key.into(),
            coord,
            value,
            error,
        }
    }
}

/// Shortest representation that parses back to the same f64.
fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn csv_bytes(experiment: &str, rows: &[Row]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            experiment.to_string(),
            r.key.clone(),
            r.coord.map(num).unwrap_or_default(),
            num(r.value),
            r.error.map(num).unwrap_or_default(),
        ])?;
    }
    w.into_inner().context("flushing csv")
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes via `<name>.tmp` and a rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Collects artifacts written into one output directory.
pub struct OutputDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(name), bytes)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }
}
