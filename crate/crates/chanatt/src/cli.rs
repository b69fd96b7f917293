use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use chanatt_core::attention::LcaFilters;
use chanatt_core::bench::{measure_model_latency, measure_model_throughput};
use chanatt_core::data::Split;
use chanatt_core::models::{build, Arch, ModelConfig, ModelGraph, CIFAR_INPUT};
use chanatt_core::profiler::{count_flops, diff_reports, format_millions, ProfileReport};
use chanatt_core::trainer::{train, TrainConfig};
use chanatt_core::{AttentionKind, AttentionSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::cifar::{cached_norm_stats, load_split, DATA_DIR_ENV};
use crate::clock::{host_description, MonotonicClock};
use crate::config::{AttentionSection, FileConfig};
use crate::error::{Error, Result};
use crate::formats::{write_profile_csv, write_trainlog_csv, BenchDoc, Document, ProfileDoc, SteadyThroughput, TrainLogDoc};
use crate::manifest::{self, Run};
use crate::report::{self, collect_inputs, merge};

pub const DEFAULT_DATA_DIR: &str = "data/cifar-10-batches-bin";

#[derive(Debug, Parser)]
#[command(name = "chanatt", version, about = "Channel attention (SE, ECA, LCA) on CIFAR ResNet-18 and MobileNetV2: profile, train, bench, report")]
pub struct Cli {
    /// TOML file with [train], [bench] and [attention] sections and data_dir.
    /// Command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count parameters and FLOPs; writes profile JSON and CSV and prints a table row.
    Profile(ProfileArgs),
    /// Train on CIFAR-10 with SGD and cosine annealing; writes a checkpoint and the training log.
    Train(TrainArgs),
    /// Time eval-mode forward passes; writes a bench JSON.
    Bench(BenchArgs),
    /// Merge profile, bench, trainlog and results files into results.json/csv and figure data.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Resnet18,
    Mobilenetv2,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Resnet18 => Arch::ResNet18,
            ArchArg::Mobilenetv2 => Arch::MobileNetV2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttnArg {
    None,
    Se,
    Eca,
    Lca,
}

impl From<AttnArg> for AttentionKind {
    fn from(a: AttnArg) -> Self {
        match a {
            AttnArg::None => AttentionKind::None,
            AttnArg::Se => AttentionKind::Se,
            AttnArg::Eca => AttentionKind::Eca,
            AttnArg::Lca => AttentionKind::Lca,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FiltersArg {
    Shared,
    PerGroup,
}

/// Attention hyperparameters shared by every command that builds a model.
#[derive(Debug, Clone, Default, Args)]
pub struct SpecArgs {
    /// SE reduction ratio r [default: 16]
    #[arg(long)]
    pub reduction: Option<usize>,
    /// gamma in the adaptive kernel-size rule [default: 2]
    #[arg(long)]
    pub gamma: Option<usize>,
    /// b in the adaptive kernel-size rule [default: 1]
    #[arg(long)]
    pub b_offset: Option<usize>,
    /// LCA channel groups g [default: 4]
    #[arg(long)]
    pub groups: Option<usize>,
    /// LCA filters shared across groups or one per group [default: shared]
    #[arg(long, value_enum)]
    pub lca_filters: Option<FiltersArg>,
}

impl SpecArgs {
    fn resolve(&self, kind: AttentionKind, file: &AttentionSection) -> AttentionSpec {
        let mut spec = AttentionSpec::new(kind);
        spec.reduction = self.reduction.or(file.reduction).unwrap_or(spec.reduction);
        spec.gamma = self.gamma.or(file.gamma).unwrap_or(spec.gamma);
        spec.b_offset = self.b_offset.or(file.b_offset).unwrap_or(spec.b_offset);
        spec.groups = self.groups.or(file.groups).unwrap_or(spec.groups);
        let flag = self.lca_filters.map(|f| match f {
            FiltersArg::Shared => LcaFilters::Shared,
            FiltersArg::PerGroup => LcaFilters::PerGroup,
        });
        spec.lca_filters = flag.or(file.lca_filters).unwrap_or(spec.lca_filters);
        spec
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long, value_enum)]
    pub arch: ArchArg,
    #[arg(long = "attn", value_enum)]
    pub attn: AttnArg,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Output directory; manifest.json is kept at its root
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: ArchArg,
    #[arg(long = "attn", value_enum)]
    pub attn: AttnArg,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Directory holding data_batch_{1..5}.bin and test_batch.bin [default: data/cifar-10-batches-bin]
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Training epochs [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate, cosine-annealed to zero [default: 0.1]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay on conv/linear weights [default: 5e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialization, shuffling and augmentation [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use only the first N training and N test images [default: all]
    #[arg(long, value_name = "N")]
    pub subset: Option<usize>,
    /// Output directory; manifest.json is kept at its root
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Benchmark trained weights; the model configuration comes from the checkpoint
    #[arg(long, conflicts_with_all = ["arch", "attn"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "checkpoint", requires = "attn")]
    pub arch: Option<ArchArg>,
    #[arg(long = "attn", value_enum, required_unless_present = "checkpoint", requires = "arch")]
    pub attn: Option<AttnArg>,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Images per forward pass [default: 1]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Timed forward passes, at least 2 [default: 100]
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub iters: Option<u32>,
    /// Untimed warmup passes [default: 10]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Seed for the random initialization when no checkpoint is given [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also measure steady-state throughput for this many seconds
    #[arg(long, value_name = "SECS")]
    pub throughput_secs: Option<f64>,
    /// Batch size for the throughput measurement [default: --batch-size]
    #[arg(long)]
    pub throughput_batch: Option<usize>,
    /// Host description recorded in the report [default: detected OS, CPU and core count]
    #[arg(long)]
    pub environment: Option<String>,
    /// Output directory; manifest.json is kept at its root
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Profile, bench, trainlog or results JSON files, or directories to scan
    #[arg(required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Output directory for results.json, results.csv and fig_*.csv
    #[arg(long)]
    pub out: PathBuf,
}

fn tag(config: &ModelConfig) -> String {
    format!("{}_{}", config.arch.name(), config.attention.kind.name())
}

fn run_id(command: &str, config: &ModelConfig) -> String {
    format!("{command}/{}/{}", config.arch.name(), config.attention.kind.name())
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// `+28,416` style grouping.
pub fn signed_thousands(v: i64) -> String {
    let digits = v.unsigned_abs().to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    format!("{}{out}", if v < 0 { '-' } else { '+' })
}

fn pct(p: f64) -> String {
    if p != 0.0 && p.abs() < 0.01 {
        format!("{p:+.4}%")
    } else {
        format!("{p:+.2}%")
    }
}

/// Header and one Table-2 style row with the change relative to the
/// attention-free model of the same architecture.
pub fn table_row(report: &ProfileReport, baseline: &ProfileReport) -> Result<(String, String)> {
    let d = diff_reports(baseline, report)?;
    let flops_m = report.total_flops.map_or("-".into(), |f| format!("{}M", format_millions(f)));
    let dflops = match (d.flops_abs, d.flops_pct) {
        (Some(a), Some(p)) => format!("{} ({})", signed_thousands(a), pct(p)),
        _ => "-".into(),
    };
    let header = format!("{:<12} {:<9} {:>10} {:>10} {:>22} {:>26}", "arch", "attention", "params", "FLOPs", "params vs none", "FLOPs vs none");
    let row = format!(
        "{:<12} {:<9} {:>10} {:>10} {:>22} {:>26}",
        report.arch,
        report.attention,
        format!("{}M", format_millions(report.total_params)),
        flops_m,
        format!("{} ({})", signed_thousands(d.params_abs), pct(d.params_pct)),
        dflops
    );
    Ok((header, row))
}

fn cmd_profile(args: &ProfileArgs, file: &FileConfig) -> Result<()> {
    let config = ModelConfig::new(args.arch.into(), args.spec.resolve(args.attn.into(), &file.attention));
    let graph = build(config)?;
    let report = count_flops(&graph, CIFAR_INPUT)?;
    let baseline_cfg = ModelConfig { attention: AttentionSpec { kind: AttentionKind::None, ..config.attention }, ..config };
    let baseline = count_flops(&build(baseline_cfg)?, CIFAR_INPUT)?;
    let (header, row) = table_row(&report, &baseline)?;

    let doc = ProfileDoc::new(config, &report);
    let json = args.out.join(format!("profile_{}.json", tag(&config)));
    let csv = args.out.join(format!("profile_{}.csv", tag(&config)));
    crate::write_json(&json, &Document::Profile(doc.clone()))?;
    write_profile_csv(&csv, &doc)?;
    manifest::update(
        &args.out,
        Run {
            id: run_id("profile", &config),
            command: "profile",
            config: json!({ "model": to_value(&config), "input_shape": CIFAR_INPUT }),
            inputs: &[],
            outputs: &[json, csv],
        },
    )?;
    println!("{header}\n{row}");
    Ok(())
}

fn resolve_train(args: &TrainArgs, file: &FileConfig) -> TrainConfig {
    let d = TrainConfig::default();
    let f = &file.train;
    TrainConfig {
        epochs: args.epochs.or(f.epochs).unwrap_or(d.epochs),
        base_lr: args.lr.or(f.lr).unwrap_or(d.base_lr),
        momentum: args.momentum.or(f.momentum).unwrap_or(d.momentum),
        weight_decay: args.weight_decay.or(f.weight_decay).unwrap_or(d.weight_decay),
        batch_size: args.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
        seed: args.seed.or(f.seed).unwrap_or(d.seed),
        subset_size: args.subset.or(f.subset).or(d.subset_size),
    }
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<()> {
    let config = ModelConfig::new(args.arch.into(), args.spec.resolve(args.attn.into(), &file.attention));
    let cfg = resolve_train(args, file);
    cfg.validate()?;
    let mut graph = build(config)?;
    let data_dir = args.data_dir.clone().or_else(|| file.data_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));

    let train_split = load_split(&data_dir, Split::Train)?;
    let test_split = load_split(&data_dir, Split::Test)?;
    let norm_path = args.out.join("norm_stats.json");
    let (norm, cache_hit) = cached_norm_stats(&norm_path, &train_split)?;

    graph.init_weights(cfg.seed);
    eprintln!("training {} for {} epochs on {} images", tag(&config), cfg.epochs, cfg.subset_size.map_or(train_split.set.len(), |n| n.min(train_split.set.len())));
    let log = train(&mut graph, &train_split.set, &test_split.set, &norm, &cfg, &mut MonotonicClock::new(), |r| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  train {:.2}%  test {:.2}%  {:.1}s",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc * 100.0,
            r.test_acc * 100.0,
            r.seconds
        )
    })?;

    let subset = |n: usize| cfg.subset_size.map_or(n, |s| s.min(n));
    let doc = TrainLogDoc {
        config,
        train: cfg,
        norm,
        train_images: subset(train_split.set.len()),
        test_images: subset(test_split.set.len()),
        records: log.records,
    };
    let ckpt = args.out.join(format!("{}.ckpt", tag(&config)));
    let json = args.out.join(format!("trainlog_{}.json", tag(&config)));
    let csv = args.out.join(format!("trainlog_{}.csv", tag(&config)));
    checkpoint::save(&ckpt, &graph)?;
    checkpoint::load(&ckpt)?;
    crate::write_json(&json, &Document::TrainLog(doc.clone()))?;
    write_trainlog_csv(&csv, &doc.records)?;

    let mut inputs: Vec<PathBuf> = train_split.files.iter().chain(&test_split.files).cloned().collect();
    let mut outputs = vec![ckpt, json, csv];
    if cache_hit {
        inputs.push(norm_path);
    } else {
        outputs.push(norm_path);
    }
    manifest::update(
        &args.out,
        Run {
            id: run_id("train", &config),
            command: "train",
            config: json!({
                "model": to_value(&config),
                "train": to_value(&cfg),
                "data_dir": data_dir,
                "norm_stats": to_value(&norm),
            }),
            inputs: &inputs,
            outputs: &outputs,
        },
    )?;
    if let Some(acc) = doc.final_test_acc() {
        println!("{} final held-out accuracy {:.2}%", tag(&config), acc * 100.0);
    }
    Ok(())
}

fn bench_model(args: &BenchArgs, file: &FileConfig) -> Result<(ModelGraph, Option<PathBuf>)> {
    if let Some(path) = &args.checkpoint {
        let (_, graph) = checkpoint::load(path)?;
        return Ok((graph, Some(path.clone())));
    }
    let (Some(arch), Some(attn)) = (args.arch, args.attn) else {
        return Err(Error::Config("bench needs --checkpoint or both --arch and --attn".into()));
    };
    let config = ModelConfig::new(arch.into(), args.spec.resolve(attn.into(), &file.attention));
    let mut graph = build(config)?;
    graph.init_weights(args.seed.or(file.bench.seed).unwrap_or(42));
    Ok((graph, None))
}

fn cmd_bench(args: &BenchArgs, file: &FileConfig) -> Result<()> {
    let f = &file.bench;
    let batch = args.batch_size.or(f.batch_size).unwrap_or(1);
    let iters = args.iters.map(|i| i as usize).or(f.iters).unwrap_or(100);
    let warmup = args.warmup.or(f.warmup).unwrap_or(10);
    let environment = args.environment.clone().or_else(|| f.environment.clone()).unwrap_or_else(host_description);
    let budget = args.throughput_secs.or(f.throughput_secs);
    if let Some(b) = budget {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::Config(format!("throughput budget must be a positive number of seconds, got {b}")));
        }
    }
    let (graph, ckpt) = bench_model(args, file)?;
    let config = *graph.config();

    let mut clock = MonotonicClock::new();
    let report = measure_model_latency(&graph, batch, warmup, iters, &mut clock, environment)?;
    let mut doc = BenchDoc::new(config, ckpt.as_ref().map(|p| p.display().to_string()), graph.seed(), report);
    if let Some(secs) = budget {
        let tb = args.throughput_batch.or(f.throughput_batch).unwrap_or(batch);
        let ips = measure_model_throughput(&graph, tb, Duration::from_secs_f64(secs), &mut clock)?;
        doc.steady_throughput = Some(SteadyThroughput { batch_size: tb, budget_secs: secs, images_per_sec: ips });
    }

    let json = args.out.join(format!("bench_{}.json", tag(&config)));
    crate::write_json(&json, &Document::Bench(doc.clone()))?;
    let inputs: Vec<PathBuf> = ckpt.into_iter().collect();
    manifest::update(
        &args.out,
        Run {
            id: run_id("bench", &config),
            command: "bench",
            config: json!({
                "model": to_value(&config),
                "batch_size": batch,
                "warmup_iters": warmup,
                "timed_iters": iters,
                "seed": graph.seed(),
                "throughput_secs": budget,
                "environment": doc.environment,
            }),
            inputs: &inputs,
            outputs: &[json],
        },
    )?;
    let l = doc.latency_ms;
    println!(
        "{} batch {batch}: mean {:.3} ms  std {:.3}  min {:.3}  p50 {:.3}  p95 {:.3}  {:.1} img/s",
        tag(&config),
        l.mean,
        l.std,
        l.min,
        l.p50,
        l.p95,
        doc.throughput_ips
    );
    if let Some(s) = doc.steady_throughput {
        println!("steady throughput at batch {}: {:.1} img/s", s.batch_size, s.images_per_sec);
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let (docs, notes) = collect_inputs(&args.inputs)?;
    for n in &notes {
        eprintln!("note: {n}");
    }
    if docs.is_empty() {
        return Err(Error::Config("no profile, bench, trainlog or results documents among the inputs".into()));
    }
    let bundle = merge(&docs)?;
    let (outputs, warnings) = report::emit(&bundle, &args.out)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let reread = report::read_results(&outputs[0])?;
    if reread != bundle {
        return Err(crate::error::format_err(&outputs[0], "written bundle does not read back identically"));
    }
    let inputs: Vec<PathBuf> = docs.into_iter().map(|(p, _)| p).collect();
    manifest::update(
        &args.out,
        Run { id: "report".into(), command: "report", config: json!({ "inputs": inputs.len() }), inputs: &inputs, outputs: &outputs },
    )?;
    println!("{} rows written to {}", bundle.rows.len(), args.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Profile(a) => cmd_profile(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Bench(a) => cmd_bench(a, &file),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` and runs the command. Usage errors exit with 2, failures
/// with 1.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
