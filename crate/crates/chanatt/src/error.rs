use std::io;
use std::path::{Path, PathBuf};

use chanatt_core::bench::BenchError;
use chanatt_core::data::DataError;
use chanatt_core::models::ModelError;
use chanatt_core::profiler::ProfileError;
use chanatt_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("CIFAR-10 data not found in {}: missing {}. Download the binary version (cifar-10-binary.tar.gz), extract it and point --data-dir or CHANATT_DATA_DIR at the cifar-10-batches-bin directory", dir.display(), missing.join(", "))]
    MissingData { dir: PathBuf, missing: Vec<String> },
    #[error("{}: expected {expected} records, found {found}", path.display())]
    RecordCount { path: PathBuf, expected: usize, found: usize },
    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("conflicting {field} for {arch}/{attention}: {first} from {} vs {second} from {}", first_source.display(), second_source.display())]
    Conflict {
        arch: String,
        attention: String,
        field: &'static str,
        first: String,
        first_source: PathBuf,
        second: String,
        second_source: PathBuf,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn format_err(path: &Path, detail: impl ToString) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.to_string() }
}
