//! Reads the canonical `cifar-10-batches-bin` directory and caches the
//! training-split normalization statistics next to the run outputs.

use std::fs;
use std::path::{Path, PathBuf};

use chanatt_core::data::{compute_norm_stats, Cifar10Set, NormStats, Split, RECORD_BYTES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::hex;

pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";
pub const RECORDS_PER_FILE: usize = 10_000;

/// Environment variable consulted when no data directory is given.
pub const DATA_DIR_ENV: &str = "CHANATT_DATA_DIR";

pub fn split_files(split: Split) -> &'static [&'static str] {
    match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => std::slice::from_ref(&TEST_FILE),
    }
}

/// Every expected file that is absent from `dir`.
pub fn missing_files(dir: &Path) -> Vec<String> {
    TRAIN_FILES
        .iter()
        .chain([&TEST_FILE])
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect()
}

#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub set: Cifar10Set,
    /// SHA-256 over the split's files, concatenated in canonical order.
    pub sha256: String,
    pub files: Vec<PathBuf>,
}

/// Loads one split, validating record counts and labels file by file.
pub fn load_split(dir: &Path, split: Split) -> Result<LoadedSplit> {
    let missing = missing_files(dir);
    if !missing.is_empty() {
        return Err(Error::MissingData { dir: dir.to_path_buf(), missing });
    }
    let mut hasher = Sha256::new();
    let mut blobs = Vec::new();
    let mut files = Vec::new();
    for name in split_files(split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        hasher.update(&bytes);
        blobs.push((name.to_string(), bytes));
        files.push(path);
    }
    for ((name, bytes), path) in blobs.iter().zip(&files) {
        // label and truncation errors first, they carry byte offsets
        chanatt_core::data::parse_batch(bytes, name)?;
        let found = bytes.len() / RECORD_BYTES;
        if found != RECORDS_PER_FILE {
            return Err(Error::RecordCount { path: path.clone(), expected: RECORDS_PER_FILE, found });
        }
    }
    let set = Cifar10Set::from_batches(blobs.iter().map(|(n, b)| (n.as_str(), b.as_slice())), split)?;
    Ok(LoadedSplit { set, sha256: hex(&hasher.finalize()), files })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStatsFile {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub images: usize,
    pub source_sha256: String,
}

/// Reads `path` if it was computed from the same training bytes, otherwise
/// recomputes the statistics and rewrites it. Returns whether the cache hit.
pub fn cached_norm_stats(path: &Path, train: &LoadedSplit) -> Result<(NormStats, bool)> {
    if let Ok(text) = fs::read_to_string(path) {
        if let Ok(cached) = serde_json::from_str::<NormStatsFile>(&text) {
            if cached.source_sha256 == train.sha256 && cached.images == train.set.len() {
                return Ok((NormStats { mean: cached.mean, std: cached.std }, true));
            }
        }
    }
    let stats = compute_norm_stats(&train.set)?;
    let file = NormStatsFile { mean: stats.mean, std: stats.std, images: train.set.len(), source_sha256: train.sha256.clone() };
    crate::write_json(path, &file)?;
    Ok((stats, false))
}
