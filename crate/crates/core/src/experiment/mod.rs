//! Sweeps over unlabeled rates, seeds, target domains and methods.

mod metrics;
mod runner;
mod summary;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    read_metrics_csv, read_timings_csv, MetricsRecord, MetricsWriter, RunKey, RunStatus, CURVES_FILE, METRICS_FILE,
    SCHEMA_VERSION, TIMINGS_FILE,
};
pub use runner::{run_experiment, write_ablation_table, ExperimentOutcome, ABLATION_FILE, CONFIG_FILE};
pub use summary::{mean_and_std_err, summarize, OverallEntry, Summary, SummaryEntry, SUMMARY_FILE};

use crate::domains::{
    generate_rotated_moons, generate_shifted_gaussians, read_collection, DataError, DomainCollection, GaussiansSpec,
    MoonsSpec,
};
use crate::model::ModelConfig;
use crate::trainer::{HyperParams, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("metrics file: {0}")]
    Metrics(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// DGSML ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSl,
    NoAlign,
    Neither,
    FirstOrder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSl,
        Variant::NoAlign,
        Variant::Neither,
        Variant::FirstOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSl => "no-sl",
            Variant::NoAlign => "no-align",
            Variant::Neither => "neither",
            Variant::FirstOrder => "first-order",
        }
    }

    /// Hyperparameters of this variant derived from the full configuration.
    pub fn apply(self, hp: &HyperParams) -> HyperParams {
        let mut hp = hp.clone();
        match self {
            Variant::Full => {}
            Variant::NoSl => hp.beta0 = 0.0,
            Variant::NoAlign => hp.beta1 = 0.0,
            Variant::Neither => {
                hp.beta0 = 0.0;
                hp.beta1 = 0.0;
            }
            Variant::FirstOrder => hp.second_order = false,
        }
        hp
    }
}

/// A training method. Displayed and parsed as `dgsml`, `deepall` or
/// `dgsml-<variant>` for the non-full ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dgsml(Variant),
    DeepAll,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::DeepAll => f.write_str("deepall"),
            Method::Dgsml(Variant::Full) => f.write_str("dgsml"),
            Method::Dgsml(v) => write!(f, "dgsml-{}", v.name()),
        }
    }
}

impl FromStr for Method {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "deepall" {
            return Ok(Method::DeepAll);
        }
        if s == "dgsml" {
            return Ok(Method::Dgsml(Variant::Full));
        }
        Variant::ALL
            .iter()
            .find(|v| s.strip_prefix("dgsml-") == Some(v.name()))
            .map(|&v| Method::Dgsml(v))
            .ok_or_else(|| {
                ExperimentError::Config(format!(
                    "unknown method `{s}` (expected deepall, dgsml or dgsml-{{no-sl,no-align,neither,first-order}})"
                ))
            })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase")]
pub enum DatasetSpec {
    Moons(MoonsSpec),
    Gaussians(GaussiansSpec),
    /// A dataset directory or CSV file as written by `gen-data`.
    Csv {
        path: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Moons(MoonsSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DomainCollection> {
        let c = match self {
            DatasetSpec::Moons(s) => generate_rotated_moons(s)?,
            DatasetSpec::Gaussians(s) => generate_shifted_gaussians(s)?,
            DatasetSpec::Csv { path } => read_collection(path)?,
        };
        if c.domains.iter().any(|d| !d.unlabeled.is_empty()) {
            return Err(ExperimentError::Config(
                "dataset already contains unlabeled rows; experiments mask labels themselves".into(),
            ));
        }
        Ok(c)
    }
}

/// Full description of a sweep; every field has a JSON config-file key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub hyper: HyperParams,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Target domain ids; empty means every domain in turn.
    pub targets: Vec<usize>,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    /// Concurrent runs; 0 uses all cores.
    pub jobs: usize,
    /// Skip runs already present in an existing metrics file.
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            hyper: HyperParams::default(),
            rates: vec![0.95],
            seeds: (0..5).collect(),
            targets: Vec::new(),
            methods: vec![Method::Dgsml(Variant::Full), Method::DeepAll],
            out_dir: PathBuf::from("runs"),
            jobs: 1,
            resume: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed is required".into()));
        }
        if self.rates.is_empty() {
            return Err(ExperimentError::Config(
                "at least one unlabeled rate is required".into(),
            ));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(ExperimentError::Config(format!("unlabeled rate {r} outside [0, 1)")));
        }
        if self.methods.is_empty() {
            return Err(ExperimentError::Config("at least one method is required".into()));
        }
        self.hyper.validate()?;
        Ok(())
    }

    /// The configured target ids, or all domain ids.
    pub fn resolve_targets(&self, data: &DomainCollection) -> Result<Vec<usize>> {
        if self.targets.is_empty() {
            return Ok(data.ids());
        }
        for t in &self.targets {
            if data.domain(*t).is_none() {
                return Err(ExperimentError::Config(format!("unknown target domain {t}")));
            }
        }
        Ok(self.targets.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        let all: Vec<Method> = Variant::ALL
            .iter()
            .map(|&v| Method::Dgsml(v))
            .chain([Method::DeepAll])
            .collect();
        let names: Vec<String> = all.iter().map(Method::to_string).collect();
        assert_eq!(
            names,
            [
                "dgsml",
                "dgsml-no-sl",
                "dgsml-no-align",
                "dgsml-neither",
                "dgsml-first-order",
                "deepall"
            ]
        );
        for (m, n) in all.iter().zip(&names) {
            assert_eq!(&n.parse::<Method>().unwrap(), m);
        }
        assert!("dgsml-bogus".parse::<Method>().is_err());
    }

    #[test]
    fn variants_change_only_their_knob() {
        let hp = HyperParams::default();
        assert_eq!(Variant::Full.apply(&hp), hp);
        let v = Variant::Neither.apply(&hp);
        assert_eq!((v.beta0, v.beta1, v.second_order), (0.0, 0.0, true));
        assert!(!Variant::FirstOrder.apply(&hp).second_order);
        assert_eq!(Variant::NoSl.apply(&hp).beta1, hp.beta1);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seeds":[3],"dataset":{"generator":"gaussians","num_classes":4}}"#).unwrap();
        assert_eq!(partial.seeds, vec![3]);
        match partial.dataset {
            DatasetSpec::Gaussians(g) => assert_eq!(g.num_classes, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            ExperimentConfig {
                seeds: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                rates: vec![1.0],
                ..Default::default()
            },
            ExperimentConfig {
                methods: vec![],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(ExperimentError::Config(_))));
        }
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
