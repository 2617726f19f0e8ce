//! Multi-domain datasets: synthetic generators, label masking, leave-one-out
//! splits and CSV persistence.

mod generate;
mod io;

pub use generate::{generate_rotated_moons, generate_shifted_gaussians, GaussiansSpec, MoonsSpec};
pub use io::{
    read_collection, read_dataset_csv, read_diagnostics_csv, write_collection, write_dataset_csv,
    write_diagnostics_csv, Manifest, DATASET_FILE, DIAGNOSTICS_FILE, MANIFEST_FILE,
};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("header mismatch in column {column}: expected `{expected}`, found `{found}`")]
    Header {
        column: usize,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One row of a dataset file. `label == None` means unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub domain: usize,
    pub label: Option<usize>,
    pub features: Vec<f64>,
}

/// Labeled set L and unlabeled set U of a single domain.
///
/// Labels withheld by [`mask_labels`] are kept aside for diagnostics; training
/// code only sees `labeled` and `unlabeled`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub id: usize,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<Vec<f64>>,
    withheld: Vec<Option<usize>>,
}

impl DomainDataset {
    pub fn new(id: usize, labeled: Vec<LabeledSample>, unlabeled: Vec<Vec<f64>>) -> Self {
        let withheld = vec![None; unlabeled.len()];
        Self {
            id,
            labeled,
            unlabeled,
            withheld,
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True labels of unlabeled rows where known, parallel to `unlabeled`.
    pub fn withheld_labels(&self) -> &[Option<usize>] {
        &self.withheld
    }

    pub fn set_withheld(&mut self, withheld: Vec<Option<usize>>) {
        assert_eq!(withheld.len(), self.unlabeled.len());
        self.withheld = withheld;
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|s| s.label).collect()
    }

    /// Labeled features as a constant `[M_L, dim]` tensor, `None` when empty.
    pub fn labeled_matrix(&self) -> Result<Option<Tensor>> {
        if self.labeled.is_empty() {
            return Ok(None);
        }
        let rows: Vec<&[f64]> = self.labeled.iter().map(|s| s.features.as_slice()).collect();
        Ok(Some(Tensor::from_rows(&rows)?))
    }

    pub fn unlabeled_matrix(&self) -> Result<Option<Tensor>> {
        if self.unlabeled.is_empty() {
            return Ok(None);
        }
        Ok(Some(Tensor::from_rows(&self.unlabeled)?))
    }

    /// Every sample with its true label where one is known: labeled rows,
    /// then unlabeled rows with withheld labels.
    pub fn evaluation_set(&self) -> Result<(Tensor, Vec<usize>)> {
        let mut rows: Vec<&[f64]> = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for s in &self.labeled {
            rows.push(&s.features);
            labels.push(s.label);
        }
        for (x, y) in self.unlabeled.iter().zip(&self.withheld) {
            if let Some(y) = y {
                rows.push(x);
                labels.push(*y);
            }
        }
        if rows.is_empty() {
            return Err(DataError::Config(format!(
                "domain {} has no labeled samples to evaluate",
                self.id
            )));
        }
        Ok((Tensor::from_rows(&rows)?, labels))
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        let l = self.labeled.iter().map(|s| Sample {
            domain: self.id,
            label: Some(s.label),
            features: s.features.clone(),
        });
        let u = self.unlabeled.iter().map(|x| Sample {
            domain: self.id,
            label: None,
            features: x.clone(),
        });
        l.chain(u)
    }
}

/// How a collection was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub generator: String,
    /// Per-domain shift: rotation in degrees for moons, translation for gaussians.
    pub shifts: Vec<f64>,
    pub seed: u64,
    pub noise_sd: f64,
    pub samples_per_domain: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_separation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCollection {
    pub domains: Vec<DomainDataset>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub meta: GenerationMeta,
}

impl DomainCollection {
    pub fn ids(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.id).collect()
    }

    pub fn domain(&self, id: usize) -> Option<&DomainDataset> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(DomainDataset::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DataError::Config("need at least 2 classes".into()));
        }
        for d in &self.domains {
            for s in &d.labeled {
                if s.label >= self.num_classes {
                    return Err(DataError::Config(format!("domain {} has label {}", d.id, s.label)));
                }
            }
            let widths = d
                .labeled
                .iter()
                .map(|s| s.features.len())
                .chain(d.unlabeled.iter().map(Vec::len));
            for w in widths {
                if w != self.input_dim {
                    return Err(DataError::Config(format!(
                        "domain {} has a {w}-wide sample, expected {}",
                        d.id, self.input_dim
                    )));
                }
            }
        }
        let mut ids = self.ids();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Config("duplicate domain ids".into()));
        }
        Ok(())
    }
}

/// Moves `floor(rate * M_L)` uniformly chosen labeled samples of every domain
/// into its unlabeled set. Selections that would leave a class of the domain
/// without any labeled sample are redrawn.
pub fn mask_labels(collection: &DomainCollection, rate: f64, seed: u64) -> Result<DomainCollection> {
    const MAX_DRAWS: usize = 100_000;
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::Config(format!(
            "unlabeled rate must be in [0, 1), got {rate}"
        )));
    }
    let mut out = collection.clone();
    for d in &mut out.domains {
        let m = d.labeled.len();
        let k = (rate * m as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut class_counts = vec![0usize; collection.num_classes];
        for s in &d.labeled {
            class_counts[s.label] += 1;
        }
        let present = class_counts.iter().filter(|&&n| n > 0).count();
        if m - k < present {
            return Err(DataError::Config(format!(
                "masking {k} of {m} labels in domain {} cannot keep one per class",
                d.id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d.id as u64);
        let mut chosen = None;
        for _ in 0..MAX_DRAWS {
            let mut pick = index::sample(&mut rng, m, k).into_vec();
            pick.sort_unstable();
            let mut left = class_counts.clone();
            for &i in &pick {
                left[d.labeled[i].label] -= 1;
            }
            if left.iter().zip(&class_counts).all(|(&l, &n)| n == 0 || l > 0) {
                chosen = Some(pick);
                break;
            }
        }
        let Some(pick) = chosen else {
            return Err(DataError::Config(format!(
                "no admissible mask for domain {} after {MAX_DRAWS} draws",
                d.id
            )));
        };
        let mut masked = vec![false; m];
        for &i in &pick {
            masked[i] = true;
        }
        let mut kept = Vec::with_capacity(m - k);
        for (i, s) in std::mem::take(&mut d.labeled).into_iter().enumerate() {
            if masked[i] {
                d.unlabeled.push(s.features);
                d.withheld.push(Some(s.label));
            } else {
                kept.push(s);
            }
        }
        d.labeled = kept;
    }
    Ok(out)
}

/// Removes `target` from the collection and returns it separately, with any
/// withheld labels restored so the whole domain can be scored.
pub fn leave_one_domain_out(collection: &DomainCollection, target: usize) -> Result<(DomainCollection, DomainDataset)> {
    let Some(pos) = collection.domains.iter().position(|d| d.id == target) else {
        return Err(DataError::Config(format!("unknown target domain {target}")));
    };
    let mut sources = collection.clone();
    let held = sources.domains.remove(pos);
    Ok((sources, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons() -> DomainCollection {
        generate_rotated_moons(&MoonsSpec {
            rotations: vec![0.0, 30.0, 60.0, 90.0],
            samples_per_domain: 200,
            noise_sd: 0.1,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let c = moons();
        assert_eq!(mask_labels(&c, 0.0, 3).unwrap(), c);
    }

    #[test]
    fn mask_95_percent_counts() {
        let c = mask_labels(&moons(), 0.95, 1).unwrap();
        for d in &c.domains {
            assert_eq!(d.labeled.len(), 10);
            assert_eq!(d.unlabeled.len(), 190);
            for class in 0..2 {
                assert!(d.labeled.iter().any(|s| s.label == class));
            }
            assert!(d.withheld_labels().iter().all(Option::is_some));
        }
    }

    #[test]
    fn mask_is_deterministic_and_preserves_features() {
        let base = moons();
        let a = mask_labels(&base, 0.5, 9).unwrap();
        let b = mask_labels(&base, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let c = mask_labels(&base, 0.5, 10).unwrap();
        assert_ne!(a, c);
        for (orig, masked) in base.domains.iter().zip(&a.domains) {
            assert_eq!(orig.len(), masked.len());
            let mut x: Vec<Vec<u64>> = orig
                .samples()
                .map(|s| s.features.iter().map(|v| v.to_bits()).collect())
                .collect();
            let mut y: Vec<Vec<u64>> = masked
                .samples()
                .map(|s| s.features.iter().map(|v| v.to_bits()).collect())
                .collect();
            x.sort();
            y.sort();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn mask_rejects_impossible_rates() {
        assert!(mask_labels(&moons(), 1.0, 0).is_err());
        assert!(mask_labels(&moons(), -0.1, 0).is_err());
        let tiny = generate_rotated_moons(&MoonsSpec {
            rotations: vec![0.0, 10.0],
            samples_per_domain: 4,
            noise_sd: 0.0,
            seed: 0,
        })
        .unwrap();
        // floor(0.9 * 4) = 3 leaves one labeled sample for two classes
        assert!(matches!(mask_labels(&tiny, 0.9, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn leave_one_out_partitions() {
        let c = moons();
        let (src, tgt) = leave_one_domain_out(&c, 2).unwrap();
        assert_eq!(src.ids(), vec![0, 1, 3]);
        assert_eq!(tgt.id, 2);
        assert_eq!(src.total_samples() + tgt.len(), c.total_samples());
        let covered: Vec<usize> = c
            .ids()
            .into_iter()
            .map(|t| leave_one_domain_out(&c, t).unwrap().1.id)
            .collect();
        assert_eq!(covered, c.ids());
        assert!(leave_one_domain_out(&c, 9).is_err());
    }

    #[test]
    fn evaluation_set_restores_withheld_labels() {
        let masked = mask_labels(&moons(), 0.8, 2).unwrap();
        let (_, target) = leave_one_domain_out(&masked, 1).unwrap();
        let (x, y) = target.evaluation_set().unwrap();
        assert_eq!(x.rows(), 200);
        assert_eq!(y.iter().filter(|&&c| c == 0).count(), 100);
    }
}
