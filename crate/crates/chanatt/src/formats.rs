//! JSON and CSV documents written by the subcommands. Every JSON document
//! carries a `kind` tag so `report` can take any mix of them as input.

use std::fs;
use std::path::Path;

use chanatt_core::bench::{BenchReport, LatencyStats};
use chanatt_core::data::NormStats;
use chanatt_core::models::ModelConfig;
use chanatt_core::profiler::{NodeProfile, ProfileReport};
use chanatt_core::trainer::{EpochRecord, TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};
use crate::report::ResultsBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTotals {
    pub params: u64,
    pub flops: Option<u64>,
    /// Rendered at 0.01M.
    pub params_m: String,
    pub flops_m: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub config: ModelConfig,
    pub convention: String,
    pub input_shape: Option<[usize; 3]>,
    pub totals: ProfileTotals,
    pub per_node: Vec<NodeProfile>,
}

impl ProfileDoc {
    pub fn new(config: ModelConfig, report: &ProfileReport) -> Self {
        Self {
            config,
            convention: report.convention.clone(),
            input_shape: report.input_shape,
            totals: ProfileTotals {
                params: report.total_params,
                flops: report.total_flops,
                params_m: format!("{:.2}", report.params_millions()),
                flops_m: report.flops_millions().map(|f| format!("{f:.2}")),
            },
            per_node: report.per_node.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchDoc {
    pub config: ModelConfig,
    /// Checkpoint the weights came from; `None` for a seeded random init.
    pub checkpoint: Option<String>,
    pub seed: Option<u64>,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub latency_ms: LatencyStats,
    pub throughput_ips: f64,
    /// Separate steady-state measurement, present when a budget was given.
    pub steady_throughput: Option<SteadyThroughput>,
    pub environment: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyThroughput {
    pub batch_size: usize,
    pub budget_secs: f64,
    pub images_per_sec: f64,
}

impl BenchDoc {
    pub fn new(config: ModelConfig, checkpoint: Option<String>, seed: Option<u64>, report: BenchReport) -> Self {
        Self {
            config,
            checkpoint,
            seed,
            batch_size: report.batch_size,
            warmup_iters: report.warmup_iters,
            timed_iters: report.timed_iters,
            latency_ms: report.latency_ms,
            throughput_ips: report.throughput_ips,
            steady_throughput: None,
            environment: report.environment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogDoc {
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub norm: NormStats,
    pub train_images: usize,
    pub test_images: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainLogDoc {
    /// Held-out accuracy after the last epoch, as a fraction.
    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }

    pub fn log(&self) -> TrainLog {
        TrainLog { records: self.records.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Document {
    Profile(ProfileDoc),
    Bench(BenchDoc),
    TrainLog(TrainLogDoc),
    Results(ResultsBundle),
}

impl Document {
    pub fn kind(&self) -> &'static str {
        match self {
            Document::Profile(_) => "profile",
            Document::Bench(_) => "bench",
            Document::TrainLog(_) => "trainlog",
            Document::Results(_) => "results",
        }
    }
}

pub fn read_document(path: &Path) -> Result<Document> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, format!("not a chanatt profile/bench/trainlog/results document: {e}")))
}

fn csv_bytes<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| format_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| format_err(path, e))?;
    }
    w.into_inner().map_err(|e| format_err(path, e))
}

/// Writes a CSV whose header is fixed even when there are no rows.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let bytes = csv_bytes(path, header, rows)?;
    crate::write_bytes(path, &bytes)
}

pub const PROFILE_CSV_HEADER: [&str; 5] = ["node_id", "name", "kind", "params", "flops"];
pub const TRAINLOG_CSV_HEADER: [&str; 6] = ["epoch", "lr", "train_loss", "train_acc", "test_acc", "seconds"];

pub fn write_profile_csv(path: &Path, doc: &ProfileDoc) -> Result<()> {
    write_csv(path, &PROFILE_CSV_HEADER, &doc.per_node)
}

pub fn write_trainlog_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    write_csv(path, &TRAINLOG_CSV_HEADER, records)
}

pub fn read_trainlog_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header = r.headers().map_err(|e| format_err(path, e))?.clone();
    if header.iter().ne(TRAINLOG_CSV_HEADER) {
        return Err(format_err(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e))).collect()
}
