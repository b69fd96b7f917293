//! Merging per-run documents into one results table and the per-figure
//! data series.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use chanatt_core::models::Arch;
use chanatt_core::profiler::format_millions;
use chanatt_core::AttentionKind;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};
use crate::formats::{read_document, write_csv, Document};

/// One (architecture, attention) configuration. Accuracy is the held-out
/// accuracy after the final epoch, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arch: String,
    pub attention: String,
    pub accuracy: Option<f64>,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub latency_ms: Option<f64>,
    pub throughput_ips: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub rows: Vec<ResultRow>,
}

fn parse_key(arch: &str, attention: &str) -> std::result::Result<(Arch, AttentionKind), String> {
    let a = Arch::parse(arch).ok_or_else(|| format!("unknown arch {arch:?}"))?;
    let k = AttentionKind::parse(attention).ok_or_else(|| format!("unknown attention {attention:?}"))?;
    Ok((a, k))
}

impl ResultsBundle {
    /// Known names, one row per configuration, in canonical order, and no
    /// negative or non-finite metrics.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut prev = None;
        for row in &self.rows {
            let key = parse_key(&row.arch, &row.attention)?;
            if prev.is_some_and(|p| p >= key) {
                return Err(format!("row {}/{} is duplicated or out of order", row.arch, row.attention));
            }
            prev = Some(key);
            for (name, v) in [("accuracy", row.accuracy), ("latency_ms", row.latency_ms), ("throughput_ips", row.throughput_ips)] {
                if v.is_some_and(|v| !(v.is_finite() && v >= 0.0)) {
                    return Err(format!("{}/{}: {name} must be finite and non-negative", row.arch, row.attention));
                }
            }
            if row.accuracy.is_some_and(|a| a > 100.0) {
                return Err(format!("{}/{}: accuracy is a percentage", row.arch, row.attention));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Slot {
    accuracy: Option<(f64, PathBuf)>,
    params: Option<(u64, PathBuf)>,
    flops: Option<(u64, PathBuf)>,
    latency_ms: Option<(f64, PathBuf)>,
    throughput_ips: Option<(f64, PathBuf)>,
}

/// Accumulates documents. A metric reported twice must agree exactly,
/// otherwise the merge fails naming both files.
#[derive(Debug, Default)]
pub struct Merger {
    rows: BTreeMap<(Arch, AttentionKind), Slot>,
}

fn set<T: PartialEq + Display + Copy>(
    slot: &mut Option<(T, PathBuf)>,
    value: T,
    source: &Path,
    key: (Arch, AttentionKind),
    field: &'static str,
) -> Result<()> {
    match slot {
        Some((old, _)) if *old == value => Ok(()),
        Some((old, first_source)) => Err(Error::Conflict {
            arch: key.0.to_string(),
            attention: key.1.to_string(),
            field,
            first: old.to_string(),
            first_source: first_source.clone(),
            second: value.to_string(),
            second_source: source.to_path_buf(),
        }),
        None => {
            *slot = Some((value, source.to_path_buf()));
            Ok(())
        }
    }
}

impl Merger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, doc: &Document, source: &Path) -> Result<()> {
        match doc {
            Document::Profile(p) => {
                let key = (p.config.arch, p.config.attention.kind);
                let slot = self.rows.entry(key).or_default();
                set(&mut slot.params, p.totals.params, source, key, "params")?;
                if let Some(f) = p.totals.flops {
                    set(&mut slot.flops, f, source, key, "flops")?;
                }
            }
            Document::Bench(b) => {
                let key = (b.config.arch, b.config.attention.kind);
                let slot = self.rows.entry(key).or_default();
                set(&mut slot.latency_ms, b.latency_ms.mean, source, key, "latency_ms")?;
                let ips = b.steady_throughput.map_or(b.throughput_ips, |s| s.images_per_sec);
                set(&mut slot.throughput_ips, ips, source, key, "throughput_ips")?;
            }
            Document::TrainLog(t) => {
                let key = (t.config.arch, t.config.attention.kind);
                let slot = self.rows.entry(key).or_default();
                if let Some(acc) = t.final_test_acc() {
                    set(&mut slot.accuracy, acc * 100.0, source, key, "accuracy")?;
                }
            }
            Document::Results(bundle) => {
                bundle.validate().map_err(|e| format_err(source, e))?;
                for row in &bundle.rows {
                    let key = parse_key(&row.arch, &row.attention).map_err(|e| format_err(source, e))?;
                    let slot = self.rows.entry(key).or_default();
                    if let Some(v) = row.accuracy {
                        set(&mut slot.accuracy, v, source, key, "accuracy")?;
                    }
                    if let Some(v) = row.params {
                        set(&mut slot.params, v, source, key, "params")?;
                    }
                    if let Some(v) = row.flops {
                        set(&mut slot.flops, v, source, key, "flops")?;
                    }
                    if let Some(v) = row.latency_ms {
                        set(&mut slot.latency_ms, v, source, key, "latency_ms")?;
                    }
                    if let Some(v) = row.throughput_ips {
                        set(&mut slot.throughput_ips, v, source, key, "throughput_ips")?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> ResultsBundle {
        let rows = self
            .rows
            .into_iter()
            .map(|((arch, kind), s)| ResultRow {
                arch: arch.name().into(),
                attention: kind.name().into(),
                accuracy: s.accuracy.map(|v| v.0),
                params: s.params.map(|v| v.0),
                flops: s.flops.map(|v| v.0),
                latency_ms: s.latency_ms.map(|v| v.0),
                throughput_ips: s.throughput_ips.map(|v| v.0),
            })
            .collect();
        ResultsBundle { rows }
    }
}

/// Expands directories into their JSON documents. Inside a directory,
/// previously merged `results` documents and unrelated JSON files are
/// skipped; a file named explicitly must be a document.
pub fn collect_inputs(inputs: &[PathBuf]) -> Result<(Vec<(PathBuf, Document)>, Vec<String>)> {
    let mut docs = Vec::new();
    let mut notes = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries = fs::read_dir(input)
                .map_err(io_err(input))?
                .map(|e| e.map(|e| e.path()).map_err(io_err(input)))
                .collect::<Result<Vec<_>>>()?;
            entries.sort();
            for path in entries.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
                match read_document(&path) {
                    Ok(Document::Results(_)) => notes.push(format!("skipping merged results {}", path.display())),
                    Ok(doc) => docs.push((path, doc)),
                    Err(_) => notes.push(format!("skipping {} (not a run document)", path.display())),
                }
            }
        } else {
            let doc = read_document(input)?;
            docs.push((input.clone(), doc));
        }
    }
    Ok((docs, notes))
}

pub fn merge(docs: &[(PathBuf, Document)]) -> Result<ResultsBundle> {
    let mut m = Merger::new();
    for (path, doc) in docs {
        m.add(doc, path)?;
    }
    Ok(m.finish())
}

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_CSV_HEADER: [&str; 9] =
    ["arch", "attention", "accuracy", "params", "params_m", "flops", "flops_m", "latency_ms", "throughput_ips"];

#[derive(Serialize)]
struct CsvRow<'a> {
    arch: &'a str,
    attention: &'a str,
    accuracy: Option<f64>,
    params: Option<u64>,
    params_m: Option<String>,
    flops: Option<u64>,
    flops_m: Option<String>,
    latency_ms: Option<f64>,
    throughput_ips: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Latency,
    Params,
    Flops,
    Throughput,
}

impl Axis {
    fn column(self) -> &'static str {
        match self {
            Axis::Latency => "latency_ms",
            Axis::Params => "params_m",
            Axis::Flops => "flops_m",
            Axis::Throughput => "throughput_ips",
        }
    }

    fn value(self, row: &ResultRow) -> Option<f64> {
        match self {
            Axis::Latency => row.latency_ms,
            Axis::Params => row.params.map(|p| p as f64 / 1e6),
            Axis::Flops => row.flops.map(|f| f as f64 / 1e6),
            Axis::Throughput => row.throughput_ips,
        }
    }
}

/// Figure data files and the plot each one feeds.
pub const FIGURES: [(&str, &str); 5] = [
    ("fig_latency.csv", "inference latency comparison"),
    ("fig_acc_latency.csv", "accuracy-latency trade-off"),
    ("fig_acc_params.csv", "accuracy-parameter trade-off"),
    ("fig_acc_flops.csv", "FLOPs-accuracy trade-off"),
    ("fig_acc_throughput.csv", "throughput-accuracy trade-off"),
];

fn figure_axes(index: usize) -> (Axis, bool) {
    match index {
        0 => (Axis::Latency, false),
        1 => (Axis::Latency, true),
        2 => (Axis::Params, true),
        3 => (Axis::Flops, true),
        _ => (Axis::Throughput, true),
    }
}

#[derive(Serialize)]
struct PointRow<'a> {
    arch: &'a str,
    attention: &'a str,
    x: f64,
    accuracy: Option<f64>,
}

/// Writes `results.json`, `results.csv` and the figure files into `dir`.
/// Returns the written paths and one warning per figure that had to drop
/// points.
pub fn emit(bundle: &ResultsBundle, dir: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    let json = dir.join(RESULTS_JSON);
    bundle.validate().map_err(|e| format_err(&json, e))?;
    let mut written = Vec::new();
    let mut warnings = Vec::new();

    let doc = Document::Results(bundle.clone());
    crate::write_json(&json, &doc)?;
    written.push(json);

    let csv = dir.join(RESULTS_CSV);
    let rows = bundle.rows.iter().map(|r| CsvRow {
        arch: &r.arch,
        attention: &r.attention,
        accuracy: r.accuracy,
        params: r.params,
        params_m: r.params.map(format_millions),
        flops: r.flops,
        flops_m: r.flops.map(format_millions),
        latency_ms: r.latency_ms,
        throughput_ips: r.throughput_ips,
    });
    write_csv(&csv, &RESULTS_CSV_HEADER, rows)?;
    written.push(csv);

    for (i, (file, title)) in FIGURES.iter().enumerate() {
        let (axis, with_acc) = figure_axes(i);
        let mut points = Vec::new();
        let mut dropped = Vec::new();
        for row in &bundle.rows {
            match (axis.value(row), row.accuracy) {
                (Some(x), acc) if !with_acc || acc.is_some() => {
                    points.push(PointRow { arch: &row.arch, attention: &row.attention, x, accuracy: acc })
                }
                (x, _) => {
                    let missing = if x.is_none() { axis.column() } else { "accuracy" };
                    dropped.push(format!("{}/{} ({missing} missing)", row.arch, row.attention));
                }
            }
        }
        if !dropped.is_empty() {
            warnings.push(format!("{file} ({title}): omitted {} of {} points: {}", dropped.len(), bundle.rows.len(), dropped.join(", ")));
        }
        let path = dir.join(file);
        if with_acc {
            write_csv(&path, &["arch", "attention", axis.column(), "accuracy"], points)?;
        } else {
            let points = points.into_iter().map(|p| (p.arch, p.attention, p.x));
            write_csv(&path, &["arch", "attention", axis.column()], points)?;
        }
        written.push(path);
    }
    Ok((written, warnings))
}

pub fn read_results(path: &Path) -> Result<ResultsBundle> {
    match read_document(path)? {
        Document::Results(b) => Ok(b),
        other => Err(format_err(path, format!("expected a results document, found {}", other.kind()))),
    }
}
