use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;

use super::metrics::{read_metrics_csv, MetricsRecord, MetricsWriter, RunKey, RunStatus, METRICS_FILE};
use super::summary::{summarize, Summary, SUMMARY_FILE};
use super::{ExperimentConfig, ExperimentError, Method, Result};
use crate::domains::{leave_one_domain_out, mask_labels, DomainCollection};
use crate::trainer::{deepall_train, train, Evaluation, TrainError};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Iterations averaged for the reported final losses.
const LOSS_WINDOW: usize = 100;

pub struct ExperimentOutcome {
    /// Every record in the metrics file, including resumed ones.
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    pub executed: usize,
    pub skipped: usize,
}

impl ExperimentOutcome {
    pub fn executed_all_failed(&self) -> bool {
        self.executed > 0
            && self
                .records
                .iter()
                .rev()
                .take(self.executed)
                .all(|r| r.status != RunStatus::Ok)
    }
}

struct Job<'a> {
    key: RunKey,
    data: &'a DomainCollection,
}

fn run_one(cfg: &ExperimentConfig, job: &Job<'_>) -> Result<(MetricsRecord, Vec<Evaluation>)> {
    let (sources, target) = leave_one_domain_out(job.data, job.key.target)?;
    let (x, y) = target.evaluation_set()?;
    let mut hp = cfg.hyper.clone();
    hp.seed = job.key.seed;
    let mut hook = |_: usize, p: &crate::model::ModelParams| p.accuracy(&x, &y).ok();
    let start = Instant::now();
    let result = match job.key.method {
        Method::Dgsml(v) => train(&sources, &cfg.model, &v.apply(&hp), &mut hook),
        Method::DeepAll => deepall_train(&sources, &cfg.model, &hp, &mut hook),
    };
    let wall_ms = start.elapsed().as_millis() as u64;
    let mut record = MetricsRecord {
        method: job.key.method,
        target: job.key.target,
        rate: job.key.rate(),
        seed: job.key.seed,
        status: RunStatus::Ok,
        accuracy: None,
        l_task: None,
        l_sl: None,
        l_align: None,
        wall_ms: Some(wall_ms),
    };
    match result {
        Ok((params, log)) => {
            let losses = log.trailing_losses(LOSS_WINDOW);
            let episodic = matches!(job.key.method, Method::Dgsml(_));
            record.accuracy = Some(params.accuracy(&x, &y).map_err(TrainError::from)?);
            record.l_task = Some(losses.task);
            record.l_sl = episodic.then_some(losses.semi_supervised);
            record.l_align = episodic.then_some(losses.alignment);
            Ok((record, log.evaluations))
        }
        Err(TrainError::Divergence { log, .. }) => {
            record.status = RunStatus::Diverged;
            Ok((record, log.evaluations))
        }
        Err(e) => Err(e.into()),
    }
}

/// Runs every (rate, seed, target, method) combination of `cfg`, in that
/// nesting order, and writes metrics, timings, curves, the summary and the
/// resolved configuration into `cfg.out_dir`.
///
/// Label masking depends only on (rate, seed), so every method and target
/// sees the same masked data for a given seed. Runs execute on up to
/// `cfg.jobs` threads; rows are written in job order regardless.
/// `progress` is called once per finished run with the count done so far and
/// the total.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    progress: &mut (dyn FnMut(&MetricsRecord, usize, usize) + Send),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let targets = cfg.resolve_targets(&data)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)?;
    let metrics_path = dir.join(METRICS_FILE);

    let done: HashSet<RunKey> = if cfg.resume && metrics_path.exists() {
        read_metrics_csv(&metrics_path)?
            .iter()
            .map(MetricsRecord::key)
            .collect()
    } else {
        HashSet::new()
    };

    let mut masked = Vec::new();
    for &rate in &cfg.rates {
        for &seed in &cfg.seeds {
            masked.push(((rate, seed), mask_labels(&data, rate, seed)?));
        }
    }
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for ((rate, seed), data) in &masked {
        for &target in &targets {
            for &method in &cfg.methods {
                let key = RunKey::new(method, target, *rate, *seed);
                if done.contains(&key) {
                    skipped += 1;
                } else {
                    jobs.push(Job { key, data });
                }
            }
        }
    }

    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    let mut writer = MetricsWriter::open(dir, !cfg.resume)?;
    let total = jobs.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;

    let (tx, rx) = mpsc::channel::<(usize, Result<(MetricsRecord, Vec<Evaluation>)>)>();
    std::thread::scope(|scope| -> Result<()> {
        let writer_thread = scope.spawn(move || -> Result<()> {
            let mut pending = BTreeMap::new();
            let mut next = 0;
            for (i, out) in rx {
                pending.insert(i, out);
                while let Some(out) = pending.remove(&next) {
                    let (record, curve) = out?;
                    writer.write(&record, &curve)?;
                    next += 1;
                    progress(&record, next, total);
                }
            }
            Ok(())
        });
        pool.install(|| {
            jobs.par_iter().enumerate().for_each_with(tx, |tx, (i, job)| {
                // the receiver only goes away after an earlier error
                let _ = tx.send((i, run_one(cfg, job)));
            });
        });
        writer_thread.join().expect("metrics writer panicked")
    })?;

    let records = read_metrics_csv(&metrics_path)?;
    let summary = summarize(&records);
    summary.write(&dir.join(SUMMARY_FILE))?;
    Ok(ExperimentOutcome {
        records,
        summary,
        executed: total,
        skipped,
    })
}

/// One row per (variant, target, rate) for the DGSML methods in `summary`.
pub fn write_ablation_table(summary: &Summary, path: &Path) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "target", "rate", "n", "failed", "mean", "std_err"])?;
    for e in &summary.entries {
        let Method::Dgsml(v) = e.method else { continue };
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            v.name().to_string(),
            e.target.to_string(),
            e.rate.to_string(),
            e.n.to_string(),
            e.failed.to_string(),
            f(e.mean),
            f(e.std_err),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Metrics(e.to_string()))?;
    std::fs::write(path, &bytes)?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
