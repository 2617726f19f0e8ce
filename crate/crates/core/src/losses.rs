//! Task, semi-supervised and alignment losses.
//!
//! * Task loss: mean cross-entropy of labeled rows, computed from logits in
//!   log-sum-exp form.
//! * Semi-supervised loss: per class, the distance between the labeled-only
//!   centroid and the centroid that also folds in confidence-weighted
//!   pseudo-labeled rows.
//! * Alignment loss: for every class, the distance between its vector of
//!   centroid-to-centroid distances in one domain and in another.
//!
//! Classes with no contributing rows have no centroid (`None`) and are skipped
//! wherever a centroid would be needed.

use thiserror::Error;

use crate::engine::{EngineError, Tensor};
use crate::model::{ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{rows} feature rows but {labels} labels")]
    Mismatch { rows: usize, labels: usize },
    #[error("class {0} has no centroid")]
    AbsentClass(usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Unlabeled rows with their argmax class and confidence weight.
#[derive(Debug, Clone)]
pub struct PseudoLabeledBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `[m, 1]`, each entry in `[0, 1]`.
    pub weights: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidVariant {
    LabeledOnly,
    Combined,
}

#[derive(Debug, Clone)]
pub struct CentroidSet {
    pub domain: usize,
    pub variant: CentroidVariant,
    /// Indexed by class; each present centroid has shape `[D]`.
    pub centroids: Vec<Option<Tensor>>,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn get(&self, class: usize) -> Option<&Tensor> {
        self.centroids.get(class).and_then(Option::as_ref)
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.get(class).is_some()
    }
}

/// Distances from one class centroid to every other class centroid, in
/// ascending partner order. `None` marks a partner without a centroid.
#[derive(Debug, Clone)]
pub struct DistanceVector {
    pub class: usize,
    pub entries: Vec<(usize, Option<Tensor>)>,
}

impl DistanceVector {
    pub fn values(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|(_, d)| d.as_ref().map(Tensor::item)).collect()
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(LossError::Label { label, classes }),
        None => Ok(()),
    }
}

/// Sum of scalar tensors; an empty list sums to a constant zero.
pub(crate) fn sum_scalars(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let Some(first) = it.next() else {
        return Ok(Tensor::scalar(0.0));
    };
    it.try_fold(first, |acc, t| acc.add(&t)).map_err(Into::into)
}

/// Mean over rows of `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, classes) = logits.dims2();
    if rows != labels.len() || logits.shape().len() != 2 {
        return Err(LossError::Mismatch {
            rows,
            labels: labels.len(),
        });
    }
    check_labels(labels, classes)?;
    Ok(cross_entropy_sum(logits, labels)?.scale(1.0 / rows as f64)?)
}

/// Sum over rows of `-log softmax(logits)[y]`; labels must already be checked.
pub(crate) fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, classes) = logits.dims2();
    let mut onehot = vec![0.0; rows * classes];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * classes + y] = 1.0;
    }
    let onehot = Tensor::new(&[rows, classes], onehot)?;
    Ok(logits.log_softmax(1)?.mul(&onehot)?.sum()?.neg()?)
}

pub fn task_loss(params: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(labels, params.config.num_classes)?;
    cross_entropy(&params.logits(x)?, labels)
}

/// `1 - H(p) / ln C` per row of `softmax(logits)`, shape `[m, 1]`, using
/// `0 ln 0 = 0`. Uniform rows get 0 and one-hot rows get 1.
pub fn confidence_weights(logits: &Tensor) -> Result<Tensor> {
    let (rows, classes) = logits.dims2();
    let p = logits.softmax(1)?;
    let logp = logits.log_softmax(1)?;
    let entropy = p.mul(&logp)?.sum_to(&[rows, 1])?.scale(-1.0 / (classes as f64).ln())?;
    let w = Tensor::scalar(1.0).sub(&entropy)?;
    // rounding can leave w a hair outside [0, 1]; shift by a constant so the
    // gradient is untouched
    let offset: Vec<f64> = w.data().iter().map(|&v| v.clamp(0.0, 1.0) - v).collect();
    if offset.iter().all(|&o| o == 0.0) {
        return Ok(w);
    }
    Ok(w.add(&Tensor::new(&[rows, 1], offset)?)?)
}

/// Pseudo-labels from precomputed extractor features and head logits.
pub fn pseudo_label_from(features: &Tensor, logits: &Tensor) -> Result<PseudoLabeledBatch> {
    Ok(PseudoLabeledBatch {
        features: features.clone(),
        labels: logits.argmax_rows(),
        weights: confidence_weights(logits)?,
    })
}

pub fn pseudo_label(params: &ModelParams, x_unlabeled: &Tensor) -> Result<PseudoLabeledBatch> {
    let features = params.extract_features(x_unlabeled)?;
    let logits = params.head_logits(&features)?;
    pseudo_label_from(&features, &logits)
}

fn class_rows(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        rows[y].push(i);
    }
    rows
}

fn row_sum(features: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = features.cols();
    Ok(features.select_rows(rows)?.sum_to(&[1, d])?)
}

/// Per-class mean of labeled feature rows.
pub fn labeled_centroids(features: &Tensor, labels: &[usize], classes: usize, domain: usize) -> Result<CentroidSet> {
    combined(features, labels, None, classes, domain, CentroidVariant::LabeledOnly)
}

/// Per-class `(sum of labeled rows + sum of w * pseudo-labeled rows) /
/// (labeled count + pseudo-labeled count)`.
pub fn combined_centroids(
    features: &Tensor,
    labels: &[usize],
    pseudo: Option<&PseudoLabeledBatch>,
    classes: usize,
    domain: usize,
) -> Result<CentroidSet> {
    combined(features, labels, pseudo, classes, domain, CentroidVariant::Combined)
}

fn combined(
    features: &Tensor,
    labels: &[usize],
    pseudo: Option<&PseudoLabeledBatch>,
    classes: usize,
    domain: usize,
    variant: CentroidVariant,
) -> Result<CentroidSet> {
    if features.rows() != labels.len() {
        return Err(LossError::Mismatch {
            rows: features.rows(),
            labels: labels.len(),
        });
    }
    check_labels(labels, classes)?;
    let d = features.cols();
    let labeled_rows = class_rows(labels, classes);
    let (weighted, pseudo_rows) = match pseudo {
        Some(p) => {
            check_labels(&p.labels, classes)?;
            if p.features.cols() != d {
                return Err(EngineError::Dimension {
                    op: "combined_centroids",
                    detail: format!("labeled width {d} vs unlabeled width {}", p.features.cols()),
                }
                .into());
            }
            (Some(p.features.mul(&p.weights)?), class_rows(&p.labels, classes))
        }
        None => (None, vec![Vec::new(); classes]),
    };

    let mut centroids = Vec::with_capacity(classes);
    for c in 0..classes {
        let (nl, nu) = (labeled_rows[c].len(), pseudo_rows[c].len());
        if nl + nu == 0 {
            centroids.push(None);
            continue;
        }
        let mut total = None;
        if nl > 0 {
            total = Some(row_sum(features, &labeled_rows[c])?);
        }
        if nu > 0 {
            let w = row_sum(weighted.as_ref().expect("pseudo rows imply a batch"), &pseudo_rows[c])?;
            total = Some(match total {
                Some(t) => t.add(&w)?,
                None => w,
            });
        }
        let total = total.expect("at least one contributing row");
        centroids.push(Some(total.scale(1.0 / (nl + nu) as f64)?.reshape(&[d])?));
    }
    Ok(CentroidSet {
        domain,
        variant,
        centroids,
    })
}

/// Sum over classes present in both sets of `||a_c - b_c||`.
pub fn semi_supervised_loss(labeled: &CentroidSet, combined: &CentroidSet) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (a, b) in labeled.centroids.iter().zip(&combined.centroids) {
        if let (Some(a), Some(b)) = (a, b) {
            terms.push(a.sub(b)?.norm()?);
        }
    }
    sum_scalars(terms)
}

pub fn centroid_distance_vector(set: &CentroidSet, class: usize) -> Result<DistanceVector> {
    let anchor = set.get(class).ok_or(LossError::AbsentClass(class))?;
    let mut entries = Vec::with_capacity(set.num_classes().saturating_sub(1));
    for (other, centroid) in set.centroids.iter().enumerate() {
        if other == class {
            continue;
        }
        let d = match centroid {
            Some(c) => Some(anchor.sub(c)?.norm()?),
            None => None,
        };
        entries.push((other, d));
    }
    Ok(DistanceVector { class, entries })
}

/// `||V_a - V_b||` over positions present in both vectors; zero when none are.
fn vector_distance(a: &DistanceVector, b: &DistanceVector) -> Result<Option<Tensor>> {
    let mut diffs = Vec::new();
    for ((_, x), (_, y)) in a.entries.iter().zip(&b.entries) {
        if let (Some(x), Some(y)) = (x, y) {
            diffs.push(x.sub(y)?);
        }
    }
    if diffs.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Tensor> = diffs.iter().collect();
    Ok(Some(Tensor::concat_rows(&refs)?.norm()?))
}

/// For every class and every (train, test) domain pair, the distance between
/// the class's centroid-distance vectors in the two domains.
pub fn alignment_loss(train: &[CentroidSet], test: &[CentroidSet]) -> Result<Tensor> {
    let classes = train
        .iter()
        .chain(test)
        .map(CentroidSet::num_classes)
        .max()
        .unwrap_or(0);
    let vectors = |sets: &[CentroidSet], c: usize| -> Result<Vec<Option<DistanceVector>>> {
        sets.iter()
            .map(|s| s.is_present(c).then(|| centroid_distance_vector(s, c)).transpose())
            .collect()
    };
    let mut terms = Vec::new();
    for c in 0..classes {
        let tr = vectors(train, c)?;
        let ts = vectors(test, c)?;
        for a in tr.iter().flatten() {
            for b in ts.iter().flatten() {
                if let Some(d) = vector_distance(a, b)? {
                    terms.push(d);
                }
            }
        }
    }
    sum_scalars(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{grad, Graph};

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn set(domain: usize, cs: &[Option<&[f64]>]) -> CentroidSet {
        CentroidSet {
            domain,
            variant: CentroidVariant::Combined,
            centroids: cs
                .iter()
                .map(|c| c.map(|v| Tensor::vector(v.to_vec()).unwrap()))
                .collect(),
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let logits = m(&[&[0.0, 0.0], &[3.0, 3.0]]);
        let l = cross_entropy(&logits, &[0, 1]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_correct_is_zero() {
        let logits = m(&[&[800.0, 0.0], &[0.0, 800.0]]);
        assert_eq!(cross_entropy(&logits, &[0, 1]).unwrap().item(), 0.0);
    }

    #[test]
    fn cross_entropy_permutation_invariant() {
        let logits = m(&[&[0.2, -1.0, 3.0], &[1.0, 2.0, 0.5], &[-0.3, 0.0, 0.1]]);
        let a = cross_entropy(&logits, &[2, 0, 1]).unwrap().item();
        let permuted = logits.select_rows(&[2, 0, 1]).unwrap();
        let b = cross_entropy(&permuted, &[1, 2, 0]).unwrap().item();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = m(&[&[0.0, 0.0]]);
        assert!(matches!(cross_entropy(&logits, &[2]), Err(LossError::Label { .. })));
        assert!(matches!(
            cross_entropy(&logits, &[0, 1]),
            Err(LossError::Mismatch { .. })
        ));
    }

    #[test]
    fn confidence_weight_examples() {
        let uniform = confidence_weights(&m(&[&[0.0; 4]])).unwrap().item();
        assert!(uniform.abs() < 1e-12 && (0.0..=1.0).contains(&uniform));
        let onehot = confidence_weights(&m(&[&[1000.0, 0.0, 0.0]])).unwrap().item();
        assert_eq!(onehot, 1.0);
        let w = confidence_weights(&m(&[&[0.8f64.ln(), 0.2f64.ln()]])).unwrap().item();
        let h = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln()) / 2f64.ln();
        assert!((w - (1.0 - h)).abs() < 1e-12);
        assert!((w - 0.2781).abs() < 5e-5);
    }

    #[test]
    fn labeled_centroid_examples() {
        let f = m(&[&[1.0, 0.0], &[3.0, 0.0], &[5.0, 5.0]]);
        let cs = labeled_centroids(&f, &[0, 0, 1], 3, 0).unwrap();
        assert_eq!(cs.get(0).unwrap().data(), &[2.0, 0.0]);
        assert_eq!(cs.get(1).unwrap().data(), &[5.0, 5.0]);
        assert!(cs.get(2).is_none());
        assert_eq!(cs.variant, CentroidVariant::LabeledOnly);
    }

    #[test]
    fn combined_centroid_examples() {
        let f = m(&[&[2.0, 0.0]]);
        let pseudo = PseudoLabeledBatch {
            features: m(&[&[4.0, 0.0]]),
            labels: vec![0],
            weights: m(&[&[0.5]]),
        };
        let cs = combined_centroids(&f, &[0], Some(&pseudo), 2, 0).unwrap();
        assert_eq!(cs.get(0).unwrap().data(), &[2.0, 0.0]);
        assert!(cs.get(1).is_none());

        let zero_w = PseudoLabeledBatch {
            weights: m(&[&[0.0]]),
            ..pseudo
        };
        let cs = combined_centroids(&f, &[0], Some(&zero_w), 2, 0).unwrap();
        assert_eq!(cs.get(0).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn combined_without_pseudo_equals_labeled_bitwise() {
        let f = m(&[&[0.1, 0.7], &[0.3, -0.2], &[1.0 / 3.0, 2.0 / 7.0]]);
        let y = [1, 0, 1];
        let a = labeled_centroids(&f, &y, 2, 0).unwrap();
        let b = combined_centroids(&f, &y, None, 2, 0).unwrap();
        for c in 0..2 {
            assert_eq!(a.get(c).unwrap().data(), b.get(c).unwrap().data());
        }
        assert_eq!(semi_supervised_loss(&a, &b).unwrap().item(), 0.0);
    }

    #[test]
    fn semi_supervised_three_four_five() {
        let a = set(0, &[Some(&[0.0, 0.0])]);
        let b = set(0, &[Some(&[3.0, 4.0])]);
        assert_eq!(semi_supervised_loss(&a, &b).unwrap().item(), 5.0);
    }

    #[test]
    fn semi_supervised_skips_absent_and_is_relabel_invariant() {
        let a = set(0, &[Some(&[0.0, 0.0]), Some(&[1.0, 1.0]), None]);
        let b = set(0, &[Some(&[0.0, 1.0]), None, Some(&[9.0, 9.0])]);
        assert_eq!(semi_supervised_loss(&a, &b).unwrap().item(), 1.0);
        let a2 = set(0, &[None, Some(&[1.0, 1.0]), Some(&[0.0, 0.0])]);
        let b2 = set(0, &[Some(&[9.0, 9.0]), None, Some(&[0.0, 1.0])]);
        assert_eq!(semi_supervised_loss(&a2, &b2).unwrap().item(), 1.0);
    }

    #[test]
    fn distance_vector_examples() {
        let s = set(0, &[Some(&[0.0, 0.0]), Some(&[3.0, 4.0])]);
        let v = centroid_distance_vector(&s, 0).unwrap();
        assert_eq!(v.values(), vec![Some(5.0)]);
        let one: &[f64] = &[1.0, 1.0];
        let same = set(0, &[Some(one); 3]);
        let v = centroid_distance_vector(&same, 1).unwrap();
        assert_eq!(v.values(), vec![Some(0.0), Some(0.0)]);
        let s = set(0, &[Some(&[0.0, 0.0]), None, Some(&[1.0, 2.0])]);
        let v0 = centroid_distance_vector(&s, 0).unwrap();
        let v2 = centroid_distance_vector(&s, 2).unwrap();
        assert_eq!(v0.values()[0], None);
        assert_eq!(v0.values()[1], v2.values()[0]);
        assert!(matches!(
            centroid_distance_vector(&s, 1),
            Err(LossError::AbsentClass(1))
        ));
    }

    #[test]
    fn alignment_examples() {
        let a = set(0, &[Some(&[0.0, 0.0]), Some(&[3.0, 4.0])]);
        let b = set(1, &[Some(&[1.0, 1.0]), Some(&[1.0, 2.0])]);
        assert_eq!(
            alignment_loss(std::slice::from_ref(&a), std::slice::from_ref(&b))
                .unwrap()
                .item(),
            8.0
        );
        assert_eq!(
            alignment_loss(std::slice::from_ref(&a), std::slice::from_ref(&a))
                .unwrap()
                .item(),
            0.0
        );
        assert_eq!(
            alignment_loss(std::slice::from_ref(&a), std::slice::from_ref(&b))
                .unwrap()
                .item(),
            alignment_loss(&[b], &[a]).unwrap().item()
        );
    }

    #[test]
    fn alignment_with_no_common_positions_is_zero() {
        let a = set(0, &[Some(&[0.0, 0.0]), Some(&[1.0, 0.0]), None]);
        let b = set(1, &[Some(&[0.0, 0.0]), None, Some(&[2.0, 0.0])]);
        assert_eq!(alignment_loss(&[a], &[b]).unwrap().item(), 0.0);
    }

    #[test]
    fn weights_are_differentiable() {
        let g = Graph::new();
        let logits = g.leaf(&m(&[&[0.3, -0.4, 1.0]]));
        let w = confidence_weights(&logits).unwrap().sum().unwrap();
        let d = grad(&w, &[&logits], false).unwrap().remove(0);
        assert!(d.data().iter().any(|v| v.abs() > 1e-6));
        assert!(d.data().iter().sum::<f64>().abs() < 1e-12);
    }
}
