//! Fully-connected feature extractor and linear task head.
//!
//! The extractor maps inputs to a `feature_dim`-wide space through affine
//! layers with ReLU between them; the last feature layer stays affine so class
//! centroids can take either sign. The head is one affine layer producing
//! class logits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dims: vec![32, 32],
            feature_dim: 16,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::Config("all layer widths must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every extractor layer, input to features.
    fn feature_layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.feature_layers()
            .iter()
            .chain(std::iter::once(&(self.feature_dim, self.num_classes)))
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Extractor parameters `theta` and head parameters `phi`. Weight matrices
/// are `[fan_in, fan_out]` so a layer computes `x W + b`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub theta: Vec<NamedTensor>,
    pub phi: Vec<NamedTensor>,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |name: &str, fan_in: usize, fan_out: usize| -> Vec<NamedTensor> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            vec![
                NamedTensor {
                    name: format!("{name}.weight"),
                    value: Tensor::raw(vec![fan_in, fan_out], w),
                },
                NamedTensor {
                    name: format!("{name}.bias"),
                    value: Tensor::zeros(&[fan_out]),
                },
            ]
        };
        let mut theta = Vec::new();
        for (l, (i, o)) in config.feature_layers().into_iter().enumerate() {
            theta.extend(layer(&format!("feature.{l}"), i, o));
        }
        let phi = layer("head", config.feature_dim, config.num_classes);
        Ok(Self {
            config: config.clone(),
            theta,
            phi,
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.theta.iter().chain(&self.phi).map(|p| &p.value)
    }

    pub fn named(&self) -> impl Iterator<Item = &NamedTensor> {
        self.theta.iter().chain(&self.phi)
    }

    pub fn len(&self) -> usize {
        self.theta.len() + self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies `f` to every tensor, keeping names and the theta/phi split.
    pub fn try_map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &Tensor) -> Result<Tensor>,
    {
        let mut k = 0;
        let mut map = |group: &[NamedTensor]| -> Result<Vec<NamedTensor>> {
            group
                .iter()
                .map(|p| {
                    let value = f(k, &p.value)?;
                    k += 1;
                    Ok(NamedTensor {
                        name: p.name.clone(),
                        value,
                    })
                })
                .collect()
        };
        let theta = map(&self.theta)?;
        let phi = map(&self.phi)?;
        Ok(Self {
            config: self.config.clone(),
            theta,
            phi,
        })
    }

    /// Fresh leaves of `graph` holding these values.
    pub fn attach(&self, graph: &Graph) -> Self {
        self.try_map(|_, t| Ok(graph.leaf(t))).expect("attach is infallible")
    }

    pub fn detach(&self) -> Self {
        self.try_map(|_, t| Ok(t.detach())).expect("detach is infallible")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(EngineError::Dimension {
                op: "extract_features",
                detail: format!("expected [batch, {}], got {:?}", self.config.input_dim, x.shape()),
            }
            .into());
        }
        let layers = self.theta.chunks(2);
        let last = layers.len() - 1;
        let mut h = x.clone();
        for (l, wb) in layers.enumerate() {
            h = h.matmul(&wb[0].value)?.add(&wb[1].value)?;
            if l < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features.matmul(&self.phi[0].value)?.add(&self.phi[1].value)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head_logits(&self.extract_features(x)?)
    }

    /// Class probabilities, one row per input row.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.softmax(1)?)
    }

    /// Fraction of rows whose argmax prediction equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.logits(&x.detach())?.argmax_rows();
        if pred.len() != labels.len() {
            return Err(ModelError::Argument(format!(
                "{} rows but {} labels",
                pred.len(),
                labels.len()
            )));
        }
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// `p - lr * g` for every parameter. With `track` the result stays in the
    /// graph of its operands; otherwise it is detached.
    pub fn sgd_step(&self, grads: &[Tensor], lr: f64, track: bool) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(ModelError::Argument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if grads.len() != self.len() {
            return Err(ModelError::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        self.try_map(|k, p| {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(EngineError::Dimension {
                    op: "sgd_step",
                    detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                }
                .into());
            }
            let next = p.sub(&g.scale(lr)?)?;
            Ok(if track { next } else { next.detach() })
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .named()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let template = Self::init(&ck.config, 0)?;
        if ck.tensors.len() != template.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.len(),
                ck.tensors.len()
            )));
        }
        template.try_map(|k, t| {
            let rec = &ck.tensors[k];
            let name = &template.named().nth(k).expect("index in range").name;
            if &rec.name != name || rec.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "record {k} is {} {:?}, expected {name} {:?}",
                    rec.name,
                    rec.shape,
                    t.shape()
                )));
            }
            Ok(Tensor::new(&rec.shape, rec.values.clone())?)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ck)
    }
}

/// Flat `(name, shape, values)` records; serde_json writes the shortest
/// decimal that round-trips each double exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
