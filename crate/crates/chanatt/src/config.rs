//! Optional TOML configuration file. Anything given on the command line
//! wins over the file, and the file wins over the built-in defaults.
//!
//! ```toml
//! data_dir = "data/cifar-10-batches-bin"
//!
//! [train]
//! epochs = 5
//! subset = 2000
//!
//! [bench]
//! iters = 100
//! environment = "desktop, 8 cores"
//!
//! [attention]
//! reduction = 16
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use chanatt_core::attention::LcaFilters;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub batch_size: Option<usize>,
    pub iters: Option<usize>,
    pub warmup: Option<usize>,
    pub seed: Option<u64>,
    pub throughput_secs: Option<f64>,
    pub throughput_batch: Option<usize>,
    pub environment: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSection {
    pub reduction: Option<usize>,
    pub gamma: Option<usize>,
    pub b_offset: Option<usize>,
    pub groups: Option<usize>,
    pub lca_filters: Option<LcaFilters>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub attention: AttentionSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}
