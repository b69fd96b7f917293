//! `manifest.json` at the root of an output directory. Each command
//! invocation is one run entry; runs are keyed by command and
//! configuration, so re-running a command replaces its entry and every
//! output file belongs to exactly one run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::sha256_file;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory when the file lives inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub runs: BTreeMap<String, RunRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { format: MANIFEST_FORMAT, runs: BTreeMap::new() }
    }
}

fn display_path(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .filter(|c| !matches!(c, Component::CurDir))
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn file_record(path: &Path, root: &Path) -> Result<FileRecord> {
    Ok(FileRecord { path: display_path(path, root), sha256: sha256_file(path)? })
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        if m.format != MANIFEST_FORMAT {
            return Err(format_err(path, format!("unsupported manifest format {}", m.format)));
        }
        Ok(m)
    }

    /// Inserts `run` under `id`, dropping its outputs from any other run.
    pub fn record(&mut self, id: String, run: RunRecord) {
        for (other_id, other) in self.runs.iter_mut() {
            if *other_id != id {
                other.outputs.retain(|o| !run.outputs.iter().any(|n| n.path == o.path));
            }
        }
        self.runs.insert(id, run);
    }
}

/// Describes one finished command for [`update`].
pub struct Run<'a> {
    pub id: String,
    pub command: &'a str,
    pub config: serde_json::Value,
    pub inputs: &'a [PathBuf],
    pub outputs: &'a [PathBuf],
}

/// Hashes the inputs and outputs and merges the run into
/// `<out_dir>/manifest.json`. An unreadable existing manifest is an error
/// rather than being overwritten.
pub fn update(out_dir: &Path, run: Run<'_>) -> Result<PathBuf> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut manifest = if path.exists() { Manifest::read(&path)? } else { Manifest::default() };
    let hash = |files: &[PathBuf]| files.iter().map(|p| file_record(p, out_dir)).collect::<Result<Vec<_>>>();
    let record = RunRecord {
        command: run.command.into(),
        config: run.config,
        inputs: hash(run.inputs)?,
        outputs: hash(run.outputs)?,
        version: env!("CARGO_PKG_VERSION").into(),
        timestamp: unix_now(),
    };
    manifest.record(run.id, record);
    crate::write_json(&path, &manifest)?;
    Ok(path)
}
