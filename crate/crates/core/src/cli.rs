//! Command-line harness: argument parsing, run orchestration, and the CSV /
//! console reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::error::{Error, Result};
use crate::executor::{self, Mode, RunReport, TrainConfig};
use crate::mnist_io::{self, Dataset};
use crate::speculation::DistanceMetric;

pub const CSV_HEADER: &str =
    "mode,threshold,metric,seed,epoch,cumulative_time_s,avg_step_us,accuracy_pct,hit_rate,speedup_total,speedup_step";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliMode {
    Baseline,
    Speculative,
    Shadow,
    /// Baseline followed by a speculative run per threshold, same seed.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliMetric {
    Linf,
    L2,
}

impl From<CliMetric> for DistanceMetric {
    fn from(m: CliMetric) -> Self {
        match m {
            CliMetric::Linf => DistanceMetric::LInf,
            CliMetric::L2 => DistanceMetric::L2,
        }
    }
}

/// Train the MNIST MLP with sequential or speculative backpropagation and
/// report time, per-step latency, accuracy, and hit rate per epoch.
#[derive(Clone, Debug, Parser)]
#[command(name = "specbp", version)]
pub struct CliArgs {
    /// Directory holding the four uncompressed MNIST IDX files.
    #[arg(long)]
    pub data_dir: PathBuf,

    #[arg(long, value_enum, default_value = "sweep")]
    pub mode: CliMode,

    /// Speculation threshold for `speculative` and `shadow` runs.
    #[arg(long, default_value_t = 0.25, allow_negative_numbers = true)]
    pub threshold: f32,

    /// Thresholds for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.175, 0.25], allow_negative_numbers = true)]
    pub thresholds: Vec<f32>,

    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    #[arg(long, default_value_t = 15)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f32,

    #[arg(long, default_value_t = 5.0)]
    pub clip_bound: f32,

    #[arg(long, value_enum, default_value = "linf")]
    pub metric: CliMetric,

    /// Write one CSV row per (configuration, epoch) here.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

pub fn parse_args<I, T>(argv: I) -> std::result::Result<CliArgs, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = CliArgs::try_parse_from(argv)?;
    if args.mode == CliMode::Sweep && args.thresholds.is_empty() {
        return Err(clap::Error::raw(
            clap::error::ErrorKind::ValueValidation,
            "sweep mode needs at least one threshold\n",
        ));
    }
    Ok(args)
}

impl CliArgs {
    fn base_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            clip_bound: self.clip_bound,
            threshold: self.threshold,
            epochs: self.epochs,
            seed: self.seed,
            mode: Mode::Baseline,
            metric: self.metric.into(),
            audit: false,
        }
    }

    /// Configurations to run, in report order.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let base = self.base_config();
        let single = |mode| vec![TrainConfig { mode, ..base.clone() }];
        match self.mode {
            CliMode::Baseline => single(Mode::Baseline),
            CliMode::Speculative => single(Mode::Speculative),
            CliMode::Shadow => single(Mode::Shadow),
            CliMode::Sweep => std::iter::once(base.clone())
                .chain(self.thresholds.iter().map(|&threshold| TrainConfig {
                    mode: Mode::Speculative,
                    threshold,
                    ..base.clone()
                }))
                .collect(),
        }
    }
}

/// One CSV / console line.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    /// Absent for baseline rows.
    pub threshold: Option<f32>,
    pub metric: DistanceMetric,
    pub seed: u64,
    pub epoch: usize,
    pub cumulative_time_s: f64,
    pub avg_step_us: f64,
    pub accuracy_pct: f64,
    pub hit_rate: f64,
    /// `baseline_time / config_time`; absent when no baseline ran.
    pub speedup_total: Option<f64>,
    pub speedup_step: Option<f64>,
    pub accuracy_delta_pct: Option<f64>,
}

/// Flattens reports into rows, pairing each epoch with the baseline run of
/// the same seed (if one is present) for the speedup columns.
pub fn report_rows(reports: &[RunReport]) -> Vec<ReportRow> {
    let baseline = reports.iter().find(|r| r.config.mode == Mode::Baseline);
    let mut rows = Vec::new();
    for report in reports {
        let cfg = &report.config;
        let base = baseline.filter(|b| b.config.seed == cfg.seed);
        for rec in &report.records {
            let base_rec = base.and_then(|b| b.records.iter().find(|r| r.epoch == rec.epoch));
            let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };
            let is_base = cfg.mode == Mode::Baseline;
            rows.push(ReportRow {
                mode: cfg.mode,
                threshold: (!is_base).then_some(cfg.threshold),
                metric: cfg.metric,
                seed: cfg.seed,
                epoch: rec.epoch,
                cumulative_time_s: rec.cumulative_time_s,
                avg_step_us: rec.avg_step_us,
                accuracy_pct: rec.accuracy_pct,
                hit_rate: rec.hit_rate,
                speedup_total: if is_base {
                    Some(1.0)
                } else {
                    base_rec.map(|b| ratio(b.cumulative_time_s, rec.cumulative_time_s))
                },
                speedup_step: if is_base {
                    Some(1.0)
                } else {
                    base_rec.map(|b| ratio(b.avg_step_us, rec.avg_step_us))
                },
                accuracy_delta_pct: base_rec.map(|b| rec.accuracy_pct - b.accuracy_pct),
            });
        }
    }
    rows
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.2},{:.2},{:.2},{:.4},{},{}",
            r.mode,
            r.threshold.map(|t| t.to_string()).unwrap_or_default(),
            r.metric,
            r.seed,
            r.epoch,
            r.cumulative_time_s,
            r.avg_step_us,
            r.accuracy_pct,
            r.hit_rate,
            opt(r.speedup_total, 4),
            opt(r.speedup_step, 4),
        );
    }
    out
}

pub fn write_csv(reports: &[RunReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::usage("no reports to write"));
    }
    fs::write(path, render_csv(&report_rows(reports))).map_err(|e| Error::io(path, e))
}

pub fn render_console(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>5} {:>10} {:>9} {:>7} {:>7} {:>8} {:>8} {:>7}",
        "mode", "theta", "epoch", "time_s", "step_us", "acc_%", "hit_%", "speedup", "step_x", "d_acc"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>5} {:>10.2} {:>9.2} {:>7.2} {:>7.2} {:>8} {:>8} {:>7}",
            r.mode.name(),
            r.threshold.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            r.epoch,
            r.cumulative_time_s,
            r.avg_step_us,
            r.accuracy_pct,
            r.hit_rate * 100.0,
            opt(r.speedup_total, 3),
            opt(r.speedup_step, 3),
            opt(r.accuracy_delta_pct, 2),
        );
    }
    out
}

/// Runs every configuration in `args` against an already loaded dataset,
/// streaming progress to `console`.
pub fn run_with_data(args: &CliArgs, data: &Dataset, console: &mut dyn Write) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for cfg in args.configs() {
        let label = match cfg.mode {
            Mode::Baseline => "baseline".to_string(),
            m => format!("{m} theta={} metric={}", cfg.threshold, cfg.metric),
        };
        let _ = writeln!(console, "running {label}, {} epochs, seed {}", cfg.epochs, cfg.seed);
        let report = executor::train(&cfg, &data.train, &data.test)?;
        reports.push(report);
    }
    let _ = write!(console, "{}", render_console(&report_rows(&reports)));
    if let Some(path) = &args.out_csv {
        write_csv(&reports, path)?;
        let _ = writeln!(console, "wrote {}", path.display());
    }
    Ok(reports)
}

pub fn run(args: &CliArgs, console: &mut dyn Write) -> Result<Vec<RunReport>> {
    let data = mnist_io::load_mnist_dir(&args.data_dir)?;
    run_with_data(args, &data, console)
}
