//! Per-run metrics files.
//!
//! * `metrics.csv`: `schema_version,method,target,rate,seed,status,accuracy,l_task,l_sl,l_align`.
//!   Deterministic: identical configuration and seeds give identical bytes.
//! * `timings.csv`: `method,target,rate,seed,wall_ms`.
//! * `curves.csv`: `method,target,rate,seed,iteration,accuracy`, the periodic
//!   target evaluations.
//!
//! Failed runs keep their row with status `diverged` and empty value fields.
//! All files are append-only; a header is written only when a file is new.

use std::fs::{File, OpenOptions};
use std::path::Path;

use super::{ExperimentError, Method, Result};
use crate::trainer::Evaluation;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const SCHEMA_VERSION: u32 = 1;

const METRICS_HEADER: [&str; 10] = [
    "schema_version",
    "method",
    "target",
    "rate",
    "seed",
    "status",
    "accuracy",
    "l_task",
    "l_sl",
    "l_align",
];
const TIMINGS_HEADER: [&str; 5] = ["method", "target", "rate", "seed", "wall_ms"];
const CURVES_HEADER: [&str; 6] = ["method", "target", "rate", "seed", "iteration", "accuracy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Diverged,
}

impl RunStatus {
    fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
        }
    }
}

/// Identity of one run within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunKey {
    pub method: Method,
    pub target: usize,
    pub rate: u64,
    pub seed: u64,
}

impl RunKey {
    pub fn new(method: Method, target: usize, rate: f64, seed: u64) -> Self {
        Self {
            method,
            target,
            rate: rate.to_bits(),
            seed,
        }
    }

    pub fn rate(&self) -> f64 {
        f64::from_bits(self.rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub method: Method,
    pub target: usize,
    pub rate: f64,
    pub seed: u64,
    pub status: RunStatus,
    /// Target accuracy of the final parameters; `None` for failed runs.
    pub accuracy: Option<f64>,
    /// Mean losses over the last logged iterations.
    pub l_task: Option<f64>,
    pub l_sl: Option<f64>,
    pub l_align: Option<f64>,
    /// Wall time; stored in the timings file only.
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn key(&self) -> RunKey {
        RunKey::new(self.method, self.target, self.rate, self.seed)
    }

    fn key_fields(&self) -> [String; 4] {
        [
            self.method.to_string(),
            self.target.to_string(),
            self.rate.to_string(),
            self.seed.to_string(),
        ]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn open_append(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header)?;
        w.flush()?;
    }
    Ok(w)
}

/// Appends records to the metrics, timings and curves files of a directory.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timings: csv::Writer<File>,
    curves: csv::Writer<File>,
}

impl MetricsWriter {
    /// Opens the files in `dir` for appending; with `truncate` they are
    /// started afresh.
    pub fn open(dir: &Path, truncate: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let files = [METRICS_FILE, TIMINGS_FILE, CURVES_FILE].map(|f| dir.join(f));
        if truncate {
            for f in &files {
                if f.exists() {
                    std::fs::remove_file(f)?;
                }
            }
        } else if files[0].exists() {
            check_schema(&files[0])?;
        }
        Ok(Self {
            metrics: open_append(&files[0], &METRICS_HEADER)?,
            timings: open_append(&files[1], &TIMINGS_HEADER)?,
            curves: open_append(&files[2], &CURVES_HEADER)?,
        })
    }

    pub fn write(&mut self, r: &MetricsRecord, curve: &[Evaluation]) -> Result<()> {
        if let Some(a) = r.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(ExperimentError::Metrics(format!("accuracy {a} outside [0, 1]")));
            }
        }
        let key = r.key_fields();
        let mut row = vec![SCHEMA_VERSION.to_string()];
        row.extend(key.iter().cloned());
        row.push(r.status.as_str().into());
        row.extend([opt(r.accuracy), opt(r.l_task), opt(r.l_sl), opt(r.l_align)]);
        self.metrics.write_record(&row)?;

        let mut timing = key.to_vec();
        timing.push(r.wall_ms.map(|t| t.to_string()).unwrap_or_default());
        self.timings.write_record(&timing)?;

        for e in curve {
            let mut row = key.to_vec();
            row.extend([e.iteration.to_string(), e.accuracy.to_string()]);
            self.curves.write_record(&row)?;
        }
        self.metrics.flush()?;
        self.timings.flush()?;
        self.curves.flush()?;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.metrics.flush();
        let _ = self.timings.flush();
        let _ = self.curves.flush();
    }
}

fn check_schema(path: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(ExperimentError::Metrics(format!(
            "{} has an unexpected header",
            path.display()
        )));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, name: &str) -> Result<T> {
    let line = rec.position().map_or(0, csv::Position::line);
    rec.get(k)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ExperimentError::Metrics(format!("line {line}: bad {name} `{}`", rec.get(k).unwrap_or(""))))
}

fn opt_field(rec: &csv::StringRecord, k: usize, name: &str) -> Result<Option<f64>> {
    match rec.get(k) {
        Some("") => Ok(None),
        _ => field(rec, k, name).map(Some),
    }
}

fn method_field(rec: &csv::StringRecord, k: usize) -> Result<Method> {
    rec.get(k).unwrap_or("").parse()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    check_schema(path)?;
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let version: u32 = field(&rec, 0, "schema_version")?;
        if version != SCHEMA_VERSION {
            return Err(ExperimentError::Metrics(format!(
                "unsupported schema version {version}"
            )));
        }
        let status = match rec.get(5) {
            Some("ok") => RunStatus::Ok,
            Some("diverged") => RunStatus::Diverged,
            other => return Err(ExperimentError::Metrics(format!("bad status {other:?}"))),
        };
        out.push(MetricsRecord {
            method: method_field(&rec, 1)?,
            target: field(&rec, 2, "target")?,
            rate: field(&rec, 3, "rate")?,
            seed: field(&rec, 4, "seed")?,
            status,
            accuracy: opt_field(&rec, 6, "accuracy")?,
            l_task: opt_field(&rec, 7, "l_task")?,
            l_sl: opt_field(&rec, 8, "l_sl")?,
            l_align: opt_field(&rec, 9, "l_align")?,
            wall_ms: None,
        });
    }
    Ok(out)
}

pub fn read_timings_csv(path: &Path) -> Result<Vec<(RunKey, u64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let key = RunKey::new(
            method_field(&rec, 0)?,
            field(&rec, 1, "target")?,
            field(&rec, 2, "rate")?,
            field(&rec, 3, "seed")?,
        );
        out.push((key, field(&rec, 4, "wall_ms")?));
    }
    Ok(out)
}
