//! File formats, dataset IO and the command line around `chanatt-core`.

pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod clock;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod report;

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use chanatt_core as core;
pub use error::{Error, Result};

use error::io_err;

/// Lowercase hexadecimal.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Writes through a sibling temporary file so a failed write never leaves a
/// half-written output behind.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(io_err(tmp))?;
    fs::rename(tmp, path).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| error::format_err(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
