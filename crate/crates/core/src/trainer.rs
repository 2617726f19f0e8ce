//! Episodic meta-train / meta-test training and the pooled supervised
//! baseline.
//!
//! One DGSML iteration:
//!
//! 1. hold out one uniformly chosen source domain as meta-test, the rest are
//!    meta-train;
//! 2. sample a labeled and an unlabeled mini-batch from every source domain;
//! 3. meta-train loss = cross-entropy on meta-train labeled rows plus
//!    `beta0` times the per-domain centroid discrepancy; take one SGD step of
//!    size `alpha0` to get the inner parameters;
//! 4. meta-test loss = cross-entropy on meta-test labeled rows at the inner
//!    parameters plus `beta1` times the centroid-distance alignment between
//!    every (meta-train, meta-test) domain pair, also at the inner parameters;
//! 5. step the original parameters by `alpha1` along the gradient of the sum
//!    of both losses. In second-order mode that gradient flows through step 3.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::{DataError, DomainCollection, DomainDataset};
use crate::engine::{grad, EngineError, Graph, Tensor};
use crate::losses::{self, combined_centroids, labeled_centroids, LossError, PseudoLabeledBatch};
use crate::model::{ModelConfig, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("episode error: {0}")]
    Episode(String),
    #[error("non-finite value at iteration {iteration}")]
    Divergence { iteration: usize, log: Box<TrainLog> },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl TrainError {
    /// True for failures caused by non-finite or out-of-domain values, which
    /// training reports as divergence.
    pub fn is_numeric(&self) -> bool {
        let engine = |e: &EngineError| matches!(e, EngineError::Domain { .. });
        let model = |e: &ModelError| matches!(e, ModelError::Engine(x) if engine(x));
        match self {
            TrainError::Episode(_) => true,
            TrainError::Engine(e) => engine(e),
            TrainError::Model(e) => model(e),
            TrainError::Loss(LossError::Engine(e)) => engine(e),
            TrainError::Loss(LossError::Model(e)) => model(e),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Inner (meta-train) learning rate.
    pub alpha0: f64,
    /// Outer learning rate; also the DeepAll learning rate.
    pub alpha1: f64,
    /// Weight of the semi-supervised centroid loss.
    pub beta0: f64,
    /// Weight of the alignment loss.
    pub beta1: f64,
    pub batch_per_domain: usize,
    pub iterations: usize,
    pub second_order: bool,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha0: 0.05,
            alpha1: 0.05,
            beta0: 0.1,
            beta1: 0.1,
            batch_per_domain: 16,
            iterations: 2000,
            second_order: true,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.alpha0) || !positive(self.alpha1) {
            return Err(TrainError::Config(format!(
                "learning rates must be positive (alpha0 may be 0), got {} and {}",
                self.alpha0, self.alpha1
            )));
        }
        if !nonneg(self.beta0) || !nonneg(self.beta1) {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        if self.batch_per_domain == 0 {
            return Err(TrainError::Config("batch_per_domain must be positive".into()));
        }
        Ok(())
    }
}

/// Meta-train and meta-test domain ids of one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Picks one domain uniformly as meta-test; the others are meta-train.
pub fn split_domains<R: Rng + ?Sized>(ids: &[usize], rng: &mut R) -> Result<EpisodeSplit> {
    if ids.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 source domains, got {}",
            ids.len()
        )));
    }
    let k = rng.random_range(0..ids.len());
    Ok(EpisodeSplit {
        train: ids
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(_, &d)| d)
            .collect(),
        test: vec![ids[k]],
    })
}

/// One domain's mini-batch. All tensors are constants.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub domain: usize,
    pub labeled_x: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled_x: Option<Tensor>,
}

/// A source domain ready for sampling.
#[derive(Debug, Clone)]
pub struct DomainPool {
    pub domain: usize,
    labeled_x: Tensor,
    labels: Vec<usize>,
    unlabeled_x: Option<Tensor>,
}

impl DomainPool {
    pub fn new(d: &DomainDataset) -> Result<Self> {
        let Some(labeled_x) = d.labeled_matrix()? else {
            return Err(TrainError::Config(format!("domain {} has no labeled samples", d.id)));
        };
        Ok(Self {
            domain: d.id,
            labeled_x,
            labels: d.labels(),
            unlabeled_x: d.unlabeled_matrix()?,
        })
    }

    /// `batch` labeled rows and up to `batch` unlabeled rows, drawn uniformly
    /// with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<DomainBatch> {
        let n = self.labels.len();
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let unlabeled_x = match &self.unlabeled_x {
            Some(u) => {
                let m = batch.min(u.rows());
                let uidx: Vec<usize> = (0..m).map(|_| rng.random_range(0..u.rows())).collect();
                Some(u.select_rows(&uidx)?)
            }
            None => None,
        };
        Ok(DomainBatch {
            domain: self.domain,
            labeled_x: self.labeled_x.select_rows(&idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            unlabeled_x,
        })
    }
}

/// Features and head outputs of one domain batch under some parameters.
struct DomainForward {
    domain: usize,
    labeled_features: Tensor,
    labeled_logits: Tensor,
    labels: Vec<usize>,
    pseudo: Option<PseudoLabeledBatch>,
}

fn forward(params: &ModelParams, batch: &DomainBatch) -> Result<DomainForward> {
    if batch.labels.is_empty() {
        return Err(TrainError::Episode(format!(
            "domain {} batch has no labeled rows",
            batch.domain
        )));
    }
    let nl = batch.labels.len();
    let x = match &batch.unlabeled_x {
        Some(u) => Tensor::concat_rows(&[&batch.labeled_x, u])?,
        None => batch.labeled_x.clone(),
    };
    let features = params.extract_features(&x)?;
    let logits = params.head_logits(&features)?;
    let lrows: Vec<usize> = (0..nl).collect();
    let (labeled_features, labeled_logits, pseudo) = if x.rows() > nl {
        let urows: Vec<usize> = (nl..x.rows()).collect();
        let pseudo = losses::pseudo_label_from(&features.select_rows(&urows)?, &logits.select_rows(&urows)?)?;
        (features.select_rows(&lrows)?, logits.select_rows(&lrows)?, Some(pseudo))
    } else {
        (features, logits, None)
    };
    Ok(DomainForward {
        domain: batch.domain,
        labeled_features,
        labeled_logits,
        labels: batch.labels.clone(),
        pseudo,
    })
}

/// Mean cross-entropy over the labeled rows of several domains together.
fn pooled_task_loss(fwd: &[DomainForward]) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(fwd.len());
    let mut rows = 0;
    for f in fwd {
        terms.push(losses::cross_entropy_sum(&f.labeled_logits, &f.labels)?);
        rows += f.labels.len();
    }
    Ok(losses::sum_scalars(terms)?.scale(1.0 / rows as f64)?)
}

/// Inner-loop parameters. In second-order mode they are a differentiable
/// function of the outer parameters; otherwise they are fresh leaves of the
/// same graph and the outer step uses their gradient directly.
#[derive(Debug, Clone)]
pub struct InnerParams {
    pub params: ModelParams,
    pub second_order: bool,
}

pub struct MetaTrainOutput {
    pub inner: InnerParams,
    pub loss: Tensor,
    pub task: Tensor,
    pub semi_supervised: Tensor,
}

pub struct MetaTestOutput {
    pub loss: Tensor,
    pub task: Tensor,
    pub alignment: Tensor,
}

/// `(theta', phi') = (theta, phi) - alpha0 * grad(meta_train_loss)`.
pub fn inner_update(
    params: &ModelParams,
    meta_train_loss: &Tensor,
    alpha0: f64,
    second_order: bool,
) -> Result<InnerParams> {
    let wrt: Vec<&Tensor> = params.tensors().collect();
    let g = grad(meta_train_loss, &wrt, second_order)?;
    let stepped = params.sgd_step(&g, alpha0, second_order)?;
    let params = if second_order {
        stepped
    } else {
        let graph = meta_train_loss
            .graph()
            .or_else(|| params.tensors().find_map(Tensor::graph))
            .cloned()
            .unwrap_or_default();
        stepped.attach(&graph)
    };
    Ok(InnerParams { params, second_order })
}

/// Meta-train phase on the batches of the meta-train domains. `params` must
/// be attached to a graph.
pub fn meta_train_step(params: &ModelParams, batches: &[DomainBatch], hp: &HyperParams) -> Result<MetaTrainOutput> {
    let c = params.config.num_classes;
    let fwd = batches.iter().map(|b| forward(params, b)).collect::<Result<Vec<_>>>()?;
    let task = pooled_task_loss(&fwd)?;
    let mut sl_terms = Vec::with_capacity(fwd.len());
    for f in &fwd {
        let labeled = labeled_centroids(&f.labeled_features, &f.labels, c, f.domain)?;
        let combined = combined_centroids(&f.labeled_features, &f.labels, f.pseudo.as_ref(), c, f.domain)?;
        sl_terms.push(losses::semi_supervised_loss(&labeled, &combined)?);
    }
    let semi_supervised = losses::sum_scalars(sl_terms)?;
    let loss = if hp.beta0 > 0.0 {
        task.add(&semi_supervised.scale(hp.beta0)?)?
    } else {
        task.clone()
    };
    let inner = inner_update(params, &loss, hp.alpha0, hp.second_order)?;
    Ok(MetaTrainOutput {
        inner,
        loss,
        task,
        semi_supervised,
    })
}

/// Meta-test phase: task loss on the meta-test batches and alignment of the
/// combined centroids of every meta-train domain against every meta-test
/// domain, all at the inner parameters.
pub fn meta_test_step(
    inner: &InnerParams,
    train_batches: &[DomainBatch],
    test_batches: &[DomainBatch],
    hp: &HyperParams,
) -> Result<MetaTestOutput> {
    let p = &inner.params;
    let c = p.config.num_classes;
    let centroids = |fwd: &[DomainForward]| -> Result<Vec<losses::CentroidSet>> {
        fwd.iter()
            .map(|f| {
                Ok(combined_centroids(
                    &f.labeled_features,
                    &f.labels,
                    f.pseudo.as_ref(),
                    c,
                    f.domain,
                )?)
            })
            .collect()
    };
    let test_fwd = test_batches.iter().map(|b| forward(p, b)).collect::<Result<Vec<_>>>()?;
    let task = pooled_task_loss(&test_fwd)?;
    let alignment = if hp.beta1 > 0.0 {
        let train_fwd = train_batches
            .iter()
            .map(|b| forward(p, b))
            .collect::<Result<Vec<_>>>()?;
        losses::alignment_loss(&centroids(&train_fwd)?, &centroids(&test_fwd)?)?
    } else {
        // not part of the objective; value only, off the graph
        let detached = p.detach();
        let train_fwd = train_batches
            .iter()
            .map(|b| forward(&detached, b))
            .collect::<Result<Vec<_>>>()?;
        let test_fwd = test_batches
            .iter()
            .map(|b| forward(&detached, b))
            .collect::<Result<Vec<_>>>()?;
        losses::alignment_loss(&centroids(&train_fwd)?, &centroids(&test_fwd)?)?
    };
    let loss = if hp.beta1 > 0.0 {
        task.add(&alignment.scale(hp.beta1)?)?
    } else {
        task.clone()
    };
    Ok(MetaTestOutput { loss, task, alignment })
}

/// Gradient of `meta_train + meta_test` with respect to the outer parameters.
pub fn outer_gradient(
    params: &ModelParams,
    inner: &InnerParams,
    meta_train: &Tensor,
    meta_test: &Tensor,
) -> Result<Vec<Tensor>> {
    let total = meta_train.add(meta_test)?;
    let outer: Vec<&Tensor> = params.tensors().collect();
    if inner.second_order {
        return Ok(grad(&total, &outer, false)?);
    }
    let mut wrt = outer.clone();
    wrt.extend(inner.params.tensors());
    let g = grad(&total, &wrt, false)?;
    let n = outer.len();
    g[..n].iter().zip(&g[n..]).map(|(a, b)| Ok(a.add(b)?)).collect()
}

/// `(theta, phi) - alpha1 * grad(meta_train + meta_test)`, detached.
pub fn outer_update(
    params: &ModelParams,
    inner: &InnerParams,
    meta_train: &Tensor,
    meta_test: &Tensor,
    hp: &HyperParams,
) -> Result<ModelParams> {
    let g = outer_gradient(params, inner, meta_train, meta_test)?;
    if !g.iter().all(Tensor::all_finite) {
        return Err(TrainError::Episode("non-finite outer gradient".into()));
    }
    Ok(params.sgd_step(&g, hp.alpha1, false)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub task_train: f64,
    pub semi_supervised: f64,
    pub task_test: f64,
    pub alignment: f64,
    pub total: f64,
}

impl IterationRecord {
    fn is_finite(&self) -> bool {
        [
            self.task_train,
            self.semi_supervised,
            self.task_test,
            self.alignment,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iteration: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    pub evaluations: Vec<Evaluation>,
}

/// Averages of the logged losses over a trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossSummary {
    pub task: f64,
    pub semi_supervised: f64,
    pub alignment: f64,
}

impl TrainLog {
    /// Mean of the last `window` records; the task loss sums the meta-train
    /// and meta-test parts.
    pub fn trailing_losses(&self, window: usize) -> LossSummary {
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        if tail.is_empty() {
            return LossSummary::default();
        }
        let n = tail.len() as f64;
        let mean = |f: fn(&IterationRecord) -> f64| tail.iter().map(f).sum::<f64>() / n;
        LossSummary {
            task: mean(|r| r.task_train + r.task_test),
            semi_supervised: mean(|r| r.semi_supervised),
            alignment: mean(|r| r.alignment),
        }
    }
}

/// Called with `(iteration, params)` every `eval_every` iterations; a returned
/// accuracy is logged.
pub type EvalHook<'a> = dyn FnMut(usize, &ModelParams) -> Option<f64> + 'a;

fn episode_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn checked_config(sources: &DomainCollection, model: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = model.clone();
    cfg.input_dim = sources.input_dim;
    cfg.num_classes = sources.num_classes;
    cfg.validate()?;
    Ok(cfg)
}

fn maybe_eval(hp: &HyperParams, it: usize, params: &ModelParams, log: &mut TrainLog, hook: &mut EvalHook<'_>) {
    if hp.eval_every > 0 && (it + 1).is_multiple_of(hp.eval_every) {
        if let Some(accuracy) = hook(it + 1, params) {
            log.evaluations.push(Evaluation {
                iteration: it + 1,
                accuracy,
            });
        }
    }
}

fn divergence(iteration: usize, log: TrainLog) -> TrainError {
    TrainError::Divergence {
        iteration,
        log: Box::new(log),
    }
}

fn dgsml_iteration(
    params: &ModelParams,
    train_batches: &[DomainBatch],
    test_batches: &[DomainBatch],
    hp: &HyperParams,
    it: usize,
) -> Result<(ModelParams, IterationRecord)> {
    let graph = Graph::new();
    let attached = params.attach(&graph);
    let mt = meta_train_step(&attached, train_batches, hp)?;
    let ms = meta_test_step(&mt.inner, train_batches, test_batches, hp)?;
    let record = IterationRecord {
        iteration: it,
        task_train: mt.task.item(),
        semi_supervised: mt.semi_supervised.item(),
        task_test: ms.task.item(),
        alignment: ms.alignment.item(),
        total: mt.loss.item() + ms.loss.item(),
    };
    if !record.is_finite() {
        return Ok((params.clone(), record));
    }
    Ok((outer_update(&attached, &mt.inner, &mt.loss, &ms.loss, hp)?, record))
}

/// Episodic DGSML training on the source domains. Input width and class
/// count of `model` are taken from the data.
pub fn train(
    sources: &DomainCollection,
    model: &ModelConfig,
    hp: &HyperParams,
    hook: &mut EvalHook<'_>,
) -> Result<(ModelParams, TrainLog)> {
    hp.validate()?;
    let cfg = checked_config(sources, model)?;
    if sources.domains.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 source domains, got {}",
            sources.domains.len()
        )));
    }
    let pools = sources
        .domains
        .iter()
        .map(DomainPool::new)
        .collect::<Result<Vec<_>>>()?;
    let positions: Vec<usize> = (0..pools.len()).collect();
    let mut params = ModelParams::init(&cfg, hp.seed)?;
    let mut rng = episode_rng(hp.seed);
    let mut log = TrainLog::default();

    for it in 0..hp.iterations {
        let split = split_domains(&positions, &mut rng)?;
        // every source contributes a batch; meta-train then meta-test order
        let mut sample = |ids: &[usize]| -> Result<Vec<DomainBatch>> {
            ids.iter()
                .map(|&k| pools[k].sample(hp.batch_per_domain, &mut rng))
                .collect()
        };
        let train_batches = sample(&split.train)?;
        let test_batches = sample(&split.test)?;

        let step = dgsml_iteration(&params, &train_batches, &test_batches, hp, it);
        match step {
            Ok((p, record)) if record.is_finite() && p.all_finite() => {
                log.records.push(record);
                params = p;
            }
            Ok(_) => return Err(divergence(it, log)),
            Err(e) if e.is_numeric() => return Err(divergence(it, log)),
            Err(e) => return Err(e),
        }
        maybe_eval(hp, it, &params, &mut log, hook);
    }
    Ok((params, log))
}

/// Pooled supervised baseline: SGD with rate `alpha1` on the cross-entropy of
/// labeled samples drawn uniformly from all source domains together.
/// Unlabeled samples are ignored.
pub fn deepall_train(
    sources: &DomainCollection,
    model: &ModelConfig,
    hp: &HyperParams,
    hook: &mut EvalHook<'_>,
) -> Result<(ModelParams, TrainLog)> {
    hp.validate()?;
    let cfg = checked_config(sources, model)?;
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for d in &sources.domains {
        if d.labeled.is_empty() {
            return Err(TrainError::Config(format!("domain {} has no labeled samples", d.id)));
        }
        for s in &d.labeled {
            rows.push(&s.features);
            labels.push(s.label);
        }
    }
    if rows.is_empty() {
        return Err(TrainError::Config("no source domains".into()));
    }
    let pool_x = Tensor::from_rows(&rows)?;
    let batch = hp.batch_per_domain * sources.domains.len();
    let mut params = ModelParams::init(&cfg, hp.seed)?;
    let mut rng = episode_rng(hp.seed);
    let mut log = TrainLog::default();
    let all: Vec<usize> = (0..labels.len()).collect();

    for it in 0..hp.iterations {
        let idx: Vec<usize> = (0..batch)
            .map(|_| *all.choose(&mut rng).expect("non-empty pool"))
            .collect();
        let x = pool_x.select_rows(&idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let graph = Graph::new();
        let p = params.attach(&graph);
        let loss = match losses::task_loss(&p, &x, &y) {
            Ok(l) if l.item().is_finite() => l,
            Ok(_) => return Err(divergence(it, log)),
            Err(e) => {
                let e = TrainError::from(e);
                return Err(if e.is_numeric() { divergence(it, log) } else { e });
            }
        };
        let value = loss.item();
        log.records.push(IterationRecord {
            iteration: it,
            task_train: value,
            semi_supervised: 0.0,
            task_test: 0.0,
            alignment: 0.0,
            total: value,
        });
        let wrt: Vec<&Tensor> = p.tensors().collect();
        let g = grad(&loss, &wrt, false)?;
        params = params.sgd_step(&g, hp.alpha1, false)?;
        if !params.all_finite() {
            return Err(divergence(it, log));
        }
        maybe_eval(hp, it, &params, &mut log, hook);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_rotated_moons, mask_labels, MoonsSpec};
    use crate::model::NamedTensor;

    fn tiny_sources() -> DomainCollection {
        let c = generate_rotated_moons(&MoonsSpec {
            rotations: vec![0.0, 20.0, 40.0],
            samples_per_domain: 20,
            noise_sd: 0.1,
            seed: 5,
        })
        .unwrap();
        mask_labels(&c, 0.5, 2).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            hidden_dims: vec![6],
            feature_dim: 4,
            num_classes: 2,
        }
    }

    fn no_eval() -> impl FnMut(usize, &ModelParams) -> Option<f64> {
        |_, _| None
    }

    #[test]
    fn split_is_disjoint_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = split_domains(&[4, 7, 9], &mut rng).unwrap();
            assert_eq!(s.test.len(), 1);
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![4, 7, 9]);
        }
        let s = split_domains(&[1, 2], &mut rng).unwrap();
        assert_eq!(s.train.len(), 1);
        assert!(split_domains(&[1], &mut rng).is_err());
    }

    #[test]
    fn split_is_deterministic_and_uniform() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let s = split_domains(&[0, 1, 2], &mut a).unwrap();
            assert_eq!(s, split_domains(&[0, 1, 2], &mut b).unwrap());
            counts[s.test[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
        }
    }

    fn batches(sources: &DomainCollection, seed: u64) -> Vec<DomainBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sources
            .domains
            .iter()
            .map(|d| DomainPool::new(d).unwrap().sample(4, &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn zero_alpha0_keeps_inner_params() {
        let src = tiny_sources();
        let p0 = ModelParams::init(&tiny_model(), 1).unwrap();
        let graph = Graph::new();
        let p = p0.attach(&graph);
        let hp = HyperParams {
            alpha0: 0.0,
            ..HyperParams::default()
        };
        let out = meta_train_step(&p, &batches(&src, 1)[..2], &hp).unwrap();
        for (a, b) in p0.tensors().zip(out.inner.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(out.loss.item() >= out.task.item());
    }

    #[test]
    fn beta_zero_reduces_to_cross_entropy() {
        let src = tiny_sources();
        let p0 = ModelParams::init(&tiny_model(), 1).unwrap();
        let b = batches(&src, 3);
        let graph = Graph::new();
        let p = p0.attach(&graph);
        let hp = HyperParams {
            beta0: 0.0,
            beta1: 0.0,
            ..HyperParams::default()
        };
        let mt = meta_train_step(&p, &b[..2], &hp).unwrap();
        let ms = meta_test_step(&mt.inner, &b[..2], &b[2..], &hp).unwrap();
        assert_eq!(mt.loss.item(), mt.task.item());
        assert_eq!(ms.loss.item(), ms.task.item());
        // cross-entropy of meta-train labeled rows, computed directly
        let x = Tensor::concat_rows(&[&b[0].labeled_x, &b[1].labeled_x]).unwrap();
        let y: Vec<usize> = b[0].labels.iter().chain(&b[1].labels).copied().collect();
        let direct = losses::task_loss(&p0, &x, &y).unwrap().item();
        assert!((mt.task.item() - direct).abs() < 1e-14);
    }

    #[test]
    fn identical_domains_have_zero_alignment() {
        let src = tiny_sources();
        let p0 = ModelParams::init(&tiny_model(), 1).unwrap();
        let b = batches(&src, 3);
        let mut twin = b[0].clone();
        twin.domain = 99;
        let graph = Graph::new();
        let inner = InnerParams {
            params: p0.attach(&graph),
            second_order: true,
        };
        let ms = meta_test_step(&inner, &b[..1], &[twin], &HyperParams::default()).unwrap();
        assert_eq!(ms.alignment.item(), 0.0);
    }

    /// Quadratic toy problem: one parameter, inner loss |w|^2, meta-test loss
    /// |w'|^2 / 2 with w' = w - a * 2w.
    fn toy(second_order: bool, w: f64, a: f64) -> f64 {
        let cfg = ModelConfig {
            input_dim: 1,
            hidden_dims: vec![],
            feature_dim: 1,
            num_classes: 2,
        };
        let graph = Graph::new();
        let params = ModelParams {
            config: cfg,
            theta: vec![NamedTensor {
                name: "w".into(),
                value: graph.leaf(&Tensor::vector(vec![w]).unwrap()),
            }],
            phi: vec![],
        };
        let inner_loss = params.theta[0].value.squared_l2_norm().unwrap();
        let inner = inner_update(&params, &inner_loss, a, second_order).unwrap();
        let test_loss = inner.params.theta[0]
            .value
            .squared_l2_norm()
            .unwrap()
            .scale(0.5)
            .unwrap();
        outer_gradient(&params, &inner, &inner_loss, &test_loss).unwrap()[0].item()
    }

    #[test]
    fn outer_gradient_on_quadratic_toy() {
        let (w, a): (f64, f64) = (1.3, 0.1);
        let exact = 2.0 * w + (1.0 - 2.0 * a).powi(2) * w;
        let first = 2.0 * w + (1.0 - 2.0 * a) * w;
        assert!((toy(true, w, a) - exact).abs() < 1e-12);
        assert!((toy(false, w, a) - first).abs() < 1e-12);
        // the two modes differ by the (1 - a H) factor, H = 2
        let meta_part_second = toy(true, w, a) - 2.0 * w;
        let meta_part_first = toy(false, w, a) - 2.0 * w;
        assert!((meta_part_second - (1.0 - 2.0 * a) * meta_part_first).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let src = tiny_sources();
        let hp = HyperParams {
            iterations: 0,
            seed: 4,
            ..HyperParams::default()
        };
        let (p, log) = train(&src, &tiny_model(), &hp, &mut no_eval()).unwrap();
        let init = ModelParams::init(&tiny_model(), 4).unwrap();
        for (a, b) in p.tensors().zip(init.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let src = tiny_sources();
        let hp = HyperParams {
            iterations: 15,
            batch_per_domain: 4,
            seed: 9,
            eval_every: 5,
            ..HyperParams::default()
        };
        let mut calls = 0;
        let mut hook = |_: usize, _: &ModelParams| {
            calls += 1;
            Some(0.5)
        };
        let (a, la) = train(&src, &tiny_model(), &hp, &mut hook).unwrap();
        assert_eq!(calls, 3);
        let (b, lb) = train(&src, &tiny_model(), &hp, &mut no_eval()).unwrap();
        for (x, y) in a.tensors().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(la.records, lb.records);
        assert_eq!(la.evaluations.len(), 3);
        assert!(la.records.iter().all(IterationRecord::is_finite));
    }

    #[test]
    fn train_needs_two_sources() {
        let mut src = tiny_sources();
        src.domains.truncate(1);
        let hp = HyperParams {
            iterations: 1,
            ..HyperParams::default()
        };
        assert!(matches!(
            train(&src, &tiny_model(), &hp, &mut no_eval()),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let src = tiny_sources();
        let hp = HyperParams {
            alpha1: 1e300,
            iterations: 50,
            batch_per_domain: 4,
            ..HyperParams::default()
        };
        match train(&src, &tiny_model(), &hp, &mut no_eval()) {
            Err(TrainError::Divergence { iteration, log }) => assert_eq!(log.records.len(), iteration),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn deepall_deterministic_and_ignores_unlabeled() {
        let src = tiny_sources();
        let hp = HyperParams {
            iterations: 10,
            batch_per_domain: 4,
            ..HyperParams::default()
        };
        let (a, _) = deepall_train(&src, &tiny_model(), &hp, &mut no_eval()).unwrap();
        let (b, _) = deepall_train(&src, &tiny_model(), &hp, &mut no_eval()).unwrap();
        for (x, y) in a.tensors().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let mut stripped = src.clone();
        for d in &mut stripped.domains {
            d.unlabeled.clear();
            d.set_withheld(Vec::new());
        }
        let (c, _) = deepall_train(&stripped, &tiny_model(), &hp, &mut no_eval()).unwrap();
        for (x, y) in a.tensors().zip(c.tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn deepall_single_domain_is_plain_supervised_sgd() {
        let mut src = generate_rotated_moons(&MoonsSpec {
            rotations: vec![0.0, 1.0],
            samples_per_domain: 20,
            noise_sd: 0.1,
            seed: 1,
        })
        .unwrap();
        src.domains.truncate(1);
        let hp = HyperParams {
            iterations: 3,
            batch_per_domain: 5,
            seed: 2,
            ..HyperParams::default()
        };
        let (got, _) = deepall_train(&src, &tiny_model(), &hp, &mut no_eval()).unwrap();

        let d = &src.domains[0];
        let x_all = d.labeled_matrix().unwrap().unwrap();
        let y_all = d.labels();
        let mut p = ModelParams::init(&tiny_model(), 2).unwrap();
        let mut rng = episode_rng(2);
        let all: Vec<usize> = (0..y_all.len()).collect();
        for _ in 0..3 {
            let idx: Vec<usize> = (0..5).map(|_| *all.choose(&mut rng).unwrap()).collect();
            let graph = Graph::new();
            let pa = p.attach(&graph);
            let x = x_all.select_rows(&idx).unwrap();
            let y: Vec<usize> = idx.iter().map(|&i| y_all[i]).collect();
            let l = losses::task_loss(&pa, &x, &y).unwrap();
            let g = grad(&l, &pa.tensors().collect::<Vec<_>>(), false).unwrap();
            p = p.sgd_step(&g, hp.alpha1, false).unwrap();
        }
        for (x, y) in got.tensors().zip(p.tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
