//! Mean and standard error of target accuracy per (method, target, rate).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Method, MetricsRecord, Result, RunStatus, SCHEMA_VERSION};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: Method,
    pub target: usize,
    pub rate: f64,
    /// Successful runs contributing to the statistics.
    pub n: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub sd: Option<f64>,
    /// `sd / sqrt(n)`.
    pub std_err: Option<f64>,
}

/// Per (method, rate): the average over targets of the per-target means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEntry {
    pub method: Method,
    pub rate: f64,
    pub targets: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub entries: Vec<SummaryEntry>,
    pub overall: Vec<OverallEntry>,
}

/// `(mean, sd, std_err)` of a non-empty sample.
pub fn mean_and_std_err(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd, sd / n.sqrt())
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    method: Method,
    rate: RateKey,
    target: usize,
}

/// Orders rates numerically.
#[derive(Clone, Copy, PartialEq)]
struct RateKey(f64);

impl Eq for RateKey {}

impl PartialOrd for RateKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RateKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Groups records by (method, target, rate) in that sort order; within a
/// group, accuracies keep record order.
pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry(GroupKey {
                method: r.method,
                rate: RateKey(r.rate),
                target: r.target,
            })
            .or_default();
        match (r.status, r.accuracy) {
            (RunStatus::Ok, Some(a)) => g.0.push(a),
            _ => g.1 += 1,
        }
    }

    let mut entries = Vec::with_capacity(groups.len());
    let mut overall: BTreeMap<(Method, RateKey), Vec<f64>> = BTreeMap::new();
    for (k, (accs, failed)) in groups {
        let stats = (!accs.is_empty()).then(|| mean_and_std_err(&accs));
        if let Some((mean, _, _)) = stats {
            overall.entry((k.method, k.rate)).or_default().push(mean);
        }
        entries.push(SummaryEntry {
            method: k.method,
            target: k.target,
            rate: k.rate.0,
            n: accs.len(),
            failed,
            mean: stats.map(|s| s.0),
            sd: stats.map(|s| s.1),
            std_err: stats.map(|s| s.2),
        });
    }
    let overall = overall
        .into_iter()
        .map(|((method, rate), means)| OverallEntry {
            method,
            rate: rate.0,
            targets: means.len(),
            mean: means.iter().sum::<f64>() / means.len() as f64,
        })
        .collect();
    Summary {
        schema_version: SCHEMA_VERSION,
        entries,
        overall,
    }
}

impl Summary {
    pub fn entry(&self, method: Method, target: usize, rate: f64) -> Option<&SummaryEntry> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.target == target && e.rate == rate)
    }

    pub fn overall_mean(&self, method: Method, rate: f64) -> Option<f64> {
        self.overall
            .iter()
            .find(|e| e.method == method && e.rate == rate)
            .map(|e| e.mean)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
