//! Dataset files.
//!
//! A collection is stored as three files in one directory:
//!
//! * `dataset.csv`: header `domain,label,f0,...,f{k-1}`, one sample per row,
//!   label `-1` for unlabeled rows. Values use 17 significant digits so they
//!   read back bit-for-bit.
//! * `manifest.json`: generator metadata, number of classes, input width.
//! * `diagnostics.csv`: `domain,unlabeled_index,true_label` for every
//!   unlabeled row whose label was withheld by masking.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, DomainCollection, DomainDataset, GenerationMeta, LabeledSample, Result};

pub const DATASET_FILE: &str = "dataset.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub input_dim: usize,
    pub domains: Vec<usize>,
    pub meta: GenerationMeta,
}

impl Manifest {
    pub fn of(c: &DomainCollection) -> Self {
        Self {
            num_classes: c.num_classes,
            input_dim: c.input_dim,
            domains: c.ids(),
            meta: c.meta.clone(),
        }
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(line: u64, msg: impl Into<String>) -> DataError {
    DataError::Parse { line, msg: msg.into() }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, csv::Position::line)
}

fn check_header(found: &csv::StringRecord, expected: &[String]) -> Result<()> {
    for (column, want) in expected.iter().enumerate() {
        let got = found.get(column).unwrap_or("");
        if got != want {
            return Err(DataError::Header {
                column,
                expected: want.clone(),
                found: got.to_string(),
            });
        }
    }
    if found.len() > expected.len() {
        return Err(DataError::Header {
            column: expected.len(),
            expected: String::new(),
            found: found[expected.len()].to_string(),
        });
    }
    Ok(())
}

fn dataset_header(input_dim: usize) -> Vec<String> {
    let mut h = vec!["domain".to_string(), "label".to_string()];
    h.extend((0..input_dim).map(|k| format!("f{k}")));
    h
}

pub fn write_dataset_csv(c: &DomainCollection, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header(c.input_dim))?;
    for d in &c.domains {
        for s in d.samples() {
            let mut row = vec![
                s.domain.to_string(),
                s.label.map_or_else(|| "-1".to_string(), |y| y.to_string()),
            ];
            row.extend(s.features.iter().map(|&v| fmt_f64(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV. Domains appear in order of first occurrence; within a
/// domain, labeled and unlabeled rows keep their file order.
pub fn read_dataset_csv(path: &Path, manifest: Option<&Manifest>) -> Result<DomainCollection> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = r.headers()?.clone();
    let input_dim = match manifest {
        Some(m) => m.input_dim,
        None => header.len().saturating_sub(2),
    };
    if input_dim == 0 {
        return Err(DataError::Header {
            column: 2,
            expected: "f0".into(),
            found: String::new(),
        });
    }
    check_header(&header, &dataset_header(input_dim))?;

    let mut order: Vec<usize> = Vec::new();
    let mut by_domain: BTreeMap<usize, DomainDataset> = BTreeMap::new();
    let mut max_label = 0;
    for rec in r.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != input_dim + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", input_dim + 2, rec.len()),
            ));
        }
        let domain: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad domain id `{}`", &rec[0])))?;
        let label: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &rec[1])))?;
        let features = (0..input_dim)
            .map(|k| {
                let s = rec[k + 2].trim();
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(parse_err(line, format!("bad value `{s}` in column f{k}"))),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = by_domain.entry(domain).or_insert_with(|| {
            order.push(domain);
            DomainDataset::new(domain, Vec::new(), Vec::new())
        });
        match label {
            -1 => {
                d.unlabeled.push(features);
                d.withheld.push(None);
            }
            y if y >= 0 => {
                max_label = max_label.max(y as usize);
                d.labeled.push(LabeledSample {
                    features,
                    label: y as usize,
                });
            }
            y => return Err(parse_err(line, format!("label {y} is neither a class nor -1"))),
        }
    }

    let num_classes = match manifest {
        Some(m) => m.num_classes,
        None => (max_label + 1).max(2),
    };
    let meta = match manifest {
        Some(m) => m.meta.clone(),
        None => GenerationMeta {
            generator: "csv".into(),
            shifts: Vec::new(),
            seed: 0,
            noise_sd: 0.0,
            samples_per_domain: 0,
            class_separation: None,
        },
    };
    let domains = order
        .iter()
        .map(|id| by_domain.remove(id).expect("domain recorded"))
        .collect();
    let c = DomainCollection {
        domains,
        num_classes,
        input_dim,
        meta,
    };
    c.validate()?;
    Ok(c)
}

pub fn write_diagnostics_csv(c: &DomainCollection, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain", "unlabeled_index", "true_label"])?;
    for d in &c.domains {
        for (i, y) in d.withheld_labels().iter().enumerate() {
            if let Some(y) = y {
                w.write_record([d.id.to_string(), i.to_string(), y.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Restores withheld labels from a diagnostics file into `c`.
pub fn read_diagnostics_csv(c: &mut DomainCollection, path: &Path) -> Result<()> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let expected = ["domain", "unlabeled_index", "true_label"].map(String::from);
    check_header(r.headers()?, &expected)?;
    for rec in r.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 3 {
            return Err(parse_err(line, "expected 3 fields"));
        }
        let field = |k: usize| -> Result<usize> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad {} `{}`", expected[k], &rec[k])))
        };
        let (domain, index, label) = (field(0)?, field(1)?, field(2)?);
        let Some(d) = c.domains.iter_mut().find(|d| d.id == domain) else {
            return Err(parse_err(line, format!("unknown domain {domain}")));
        };
        if index >= d.unlabeled.len() || label >= c.num_classes {
            return Err(parse_err(line, "index or label out of range"));
        }
        d.withheld[index] = Some(label);
    }
    Ok(())
}

/// Writes dataset, manifest and diagnostics into `dir`, creating it.
pub fn write_collection(c: &DomainCollection, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset_csv(c, &dir.join(DATASET_FILE))?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&Manifest::of(c))? + "\n",
    )?;
    write_diagnostics_csv(c, &dir.join(DIAGNOSTICS_FILE))?;
    Ok(())
}

/// Reads a collection from a directory written by [`write_collection`], or
/// from a bare dataset CSV path. Manifest and diagnostics are optional.
pub fn read_collection(path: &Path) -> Result<DomainCollection> {
    let (dir, csv_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(DATASET_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&manifest_path)?)?)
    } else {
        None
    };
    let mut c = read_dataset_csv(&csv_path, manifest.as_ref())?;
    let diag = dir.join(DIAGNOSTICS_FILE);
    if diag.exists() {
        read_diagnostics_csv(&mut c, &diag)?;
    }
    Ok(c)
}
