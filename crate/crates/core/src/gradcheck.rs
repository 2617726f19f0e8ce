//! Finite-difference verification of the engine's gradients and of the full
//! meta-gradient.
//!
//! Each op check builds random inputs, reduces the op's output to a scalar
//! with a fixed random projection, and compares `grad` against central
//! differences over every input element. The relative error of one case is
//! `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::domains::{generate_rotated_moons, mask_labels, MoonsSpec};
use crate::engine::{grad, Graph, Result, Tensor};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{meta_test_step, meta_train_step, outer_gradient, DomainBatch, HyperParams, TrainError};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub cases_per_op: usize,
    pub seed: u64,
    pub step: f64,
    pub op_tolerance: f64,
    pub meta_tolerance: f64,
    /// Perturbs every analytic gradient before comparison so the detector
    /// can be exercised end to end.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            cases_per_op: 100,
            seed: 0,
            step: 1e-5,
            op_tolerance: 1e-4,
            meta_tolerance: 1e-3,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub ops: Vec<CheckResult>,
    pub meta: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn checks(&self) -> impl Iterator<Item = &CheckResult> {
        self.ops.iter().chain(&self.meta)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks().filter(|c| !c.passed()).collect()
    }

    pub fn passed(&self) -> bool {
        self.checks().all(CheckResult::passed)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<20} {:>6} {:>12} {:>10}  status",
            "check", "cases", "max rel err", "tolerance"
        )?;
        for c in self.checks() {
            writeln!(
                f,
                "{:<20} {:>6} {:>12.3e} {:>10.0e}  {}",
                c.name,
                c.cases,
                c.max_rel_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// How to draw an input's entries.
#[derive(Clone, Copy)]
enum Range {
    /// Uniform in [-2, 2].
    Any,
    /// Magnitude in [0.1, 2] with random sign, away from kinks and poles.
    AwayFromZero,
    /// Uniform in [0.2, 2].
    Positive,
}

struct Input {
    shape: Vec<usize>,
    range: Range,
}

fn input(shape: &[usize], range: Range) -> Input {
    Input {
        shape: shape.to_vec(),
        range,
    }
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Produces input specs and the op for one random case.
type CaseGen = fn(&mut ChaCha8Rng) -> (Vec<Input>, OpFn);

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn small(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn matrix(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![small(rng), dim(rng)]
}

fn any_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => vec![],
        1 => vec![dim(rng)],
        _ => matrix(rng),
    }
}

/// A second operand that broadcasts against `shape`: same shape, a row or
/// column vector, or a scalar.
fn broadcast_partner(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    match (shape.len(), rng.random_range(0..4)) {
        (2, 1) => vec![1, shape[1]],
        (2, 2) => vec![shape[0], 1],
        (_, 3) => vec![],
        _ => shape.to_vec(),
    }
}

/// Two broadcast-compatible operand shapes in random order.
fn binary(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let a = any_shape(rng);
    let b = broadcast_partner(rng, &a);
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

fn suite() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("add", |rng| {
            let (a, b) = binary(rng);
            (
                vec![input(&a, Range::Any), input(&b, Range::Any)],
                Box::new(|t| t[0].add(&t[1])),
            )
        }),
        ("sub", |rng| {
            let (a, b) = binary(rng);
            (
                vec![input(&a, Range::Any), input(&b, Range::Any)],
                Box::new(|t| t[0].sub(&t[1])),
            )
        }),
        ("mul", |rng| {
            let (a, b) = binary(rng);
            (
                vec![input(&a, Range::Any), input(&b, Range::Any)],
                Box::new(|t| t[0].mul(&t[1])),
            )
        }),
        ("div", |rng| {
            let (a, b) = binary(rng);
            (
                vec![input(&a, Range::Any), input(&b, Range::AwayFromZero)],
                Box::new(|t| t[0].div(&t[1])),
            )
        }),
        ("scale", |rng| {
            let s = rng.random_range(-2.0..2.0);
            (
                vec![input(&any_shape(rng), Range::Any)],
                Box::new(move |t| t[0].scale(s)),
            )
        }),
        ("neg", |rng| {
            (vec![input(&any_shape(rng), Range::Any)], Box::new(|t| t[0].neg()))
        }),
        ("matmul", |rng| {
            let (m, k, n) = (small(rng), dim(rng), small(rng));
            (
                vec![input(&[m, k], Range::Any), input(&[k, n], Range::Any)],
                Box::new(|t| t[0].matmul(&t[1])),
            )
        }),
        ("transpose", |rng| {
            (vec![input(&matrix(rng), Range::Any)], Box::new(|t| t[0].transpose()))
        }),
        ("relu", |rng| {
            (
                vec![input(&any_shape(rng), Range::AwayFromZero)],
                Box::new(|t| t[0].relu()),
            )
        }),
        ("exp", |rng| {
            (vec![input(&any_shape(rng), Range::Any)], Box::new(|t| t[0].exp()))
        }),
        ("log", |rng| {
            (vec![input(&any_shape(rng), Range::Positive)], Box::new(|t| t[0].log()))
        }),
        ("norm", |rng| {
            (
                vec![input(&any_shape(rng), Range::AwayFromZero)],
                Box::new(|t| t[0].norm()),
            )
        }),
        ("squared_l2_norm", |rng| {
            (
                vec![input(&any_shape(rng), Range::Any)],
                Box::new(|t| t[0].squared_l2_norm()),
            )
        }),
        ("sum", |rng| {
            (vec![input(&any_shape(rng), Range::Any)], Box::new(|t| t[0].sum()))
        }),
        ("mean", |rng| {
            (vec![input(&any_shape(rng), Range::Any)], Box::new(|t| t[0].mean()))
        }),
        ("sum_to", |rng| {
            let a = matrix(rng);
            let target = match rng.random_range(0..3) {
                0 => vec![1, a[1]],
                1 => vec![a[0], 1],
                _ => vec![],
            };
            (vec![input(&a, Range::Any)], Box::new(move |t| t[0].sum_to(&target)))
        }),
        ("broadcast_to", |rng| {
            let target = matrix(rng);
            let from = broadcast_partner(rng, &target);
            (
                vec![input(&from, Range::Any)],
                Box::new(move |t| t[0].broadcast_to(&target)),
            )
        }),
        ("reshape", |rng| {
            let a = matrix(rng);
            let n = a[0] * a[1];
            let target = if rng.random_bool(0.5) {
                vec![n]
            } else {
                vec![a[1], a[0]]
            };
            (vec![input(&a, Range::Any)], Box::new(move |t| t[0].reshape(&target)))
        }),
        ("select_rows", |rng| {
            let a = matrix(rng);
            let idx: Vec<usize> = (0..dim(rng)).map(|_| rng.random_range(0..a[0])).collect();
            (vec![input(&a, Range::Any)], Box::new(move |t| t[0].select_rows(&idx)))
        }),
        ("scatter_rows", |rng| {
            let rows = small(rng) + 1;
            let k = dim(rng);
            let c = dim(rng);
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..rows)).collect();
            (
                vec![input(&[k, c], Range::Any)],
                Box::new(move |t| t[0].scatter_rows(&idx, rows)),
            )
        }),
        ("concat_rows", |rng| {
            let c = dim(rng);
            let parts: Vec<Input> = (0..rng.random_range(1..=3))
                .map(|_| input(&[small(rng), c], Range::Any))
                .collect();
            (parts, Box::new(|t| Tensor::concat_rows(&t.iter().collect::<Vec<_>>())))
        }),
        ("softmax", |rng| {
            let axis = rng.random_range(0..2);
            (
                vec![input(&matrix(rng), Range::Any)],
                Box::new(move |t| t[0].softmax(axis)),
            )
        }),
        ("log_softmax", |rng| {
            let axis = rng.random_range(0..2);
            (
                vec![input(&matrix(rng), Range::Any)],
                Box::new(move |t| t[0].log_softmax(axis)),
            )
        }),
    ]
}

fn draw(rng: &mut ChaCha8Rng, spec: &Input) -> Tensor {
    let n = spec.shape.iter().product::<usize>();
    let data = (0..n)
        .map(|_| match spec.range {
            Range::Any => rng.random_range(-2.0..2.0),
            Range::AwayFromZero => {
                let m = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
            Range::Positive => rng.random_range(0.2..2.0),
        })
        .collect();
    Tensor::raw(spec.shape.clone(), data)
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = l2(analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = l2(analytic.iter().copied()).max(l2(numeric.iter().copied())).max(1e-8);
    diff / scale
}

fn fault(g: &mut [f64], on: bool) {
    if on {
        for v in g.iter_mut() {
            *v = *v * 1.01 + 1e-3;
        }
    }
}

/// Central differences of a scalar function of one flat parameter vector.
fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn check_case(inputs: &[Tensor], op: &OpFn, rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<f64> {
    let out = op(inputs)?;
    let projection = Tensor::raw(
        out.shape().to_vec(),
        (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let objective = |ts: &[Tensor]| -> Result<Tensor> { op(ts)?.mul(&projection)?.sum() };

    let graph = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| graph.leaf(t)).collect();
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let mut analytic: Vec<f64> = grad(&objective(&leaves)?, &refs, false)?
        .iter()
        .flat_map(|g| g.to_vec())
        .collect();
    fault(&mut analytic, opts.inject_fault);

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.to_vec()).collect();
    let numeric = numeric_gradient(&flat, opts.step, |x| {
        let mut offset = 0;
        let ts: Vec<Tensor> = inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                let v = Tensor::raw(t.shape().to_vec(), x[offset..offset + n].to_vec());
                offset += n;
                v
            })
            .collect();
        Ok(objective(&ts)?.item())
    })?;
    Ok(relative_error(&analytic, &numeric))
}

/// Runs the per-op suite.
pub fn check_ops(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (k, (name, case)) in suite().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..opts.cases_per_op {
            let (specs, op) = case(&mut rng);
            let inputs: Vec<Tensor> = specs.iter().map(|s| draw(&mut rng, s)).collect();
            worst = worst.max(check_case(&inputs, &op, &mut rng, opts)?);
        }
        results.push(CheckResult {
            name: name.to_string(),
            cases: opts.cases_per_op,
            max_rel_error: worst,
            tolerance: opts.op_tolerance,
        });
    }
    Ok(results)
}

/// Fixed meta-learning episode: three domains of 20 samples with half the
/// labels withheld; domains 0 and 1 are meta-train, 2 is meta-test.
pub struct MetaProblem {
    pub params: ModelParams,
    pub train: Vec<DomainBatch>,
    pub test: Vec<DomainBatch>,
    pub hp: HyperParams,
}

impl MetaProblem {
    pub fn new(seed: u64) -> std::result::Result<Self, TrainError> {
        let data = generate_rotated_moons(&MoonsSpec {
            rotations: vec![0.0, 40.0, 80.0],
            samples_per_domain: 20,
            noise_sd: 0.1,
            seed,
        })?;
        let data = mask_labels(&data, 0.5, seed)?;
        let batches = data
            .domains
            .iter()
            .map(|d| {
                Ok(DomainBatch {
                    domain: d.id,
                    labeled_x: d.labeled_matrix()?.expect("labeled rows survive masking"),
                    labels: d.labels(),
                    unlabeled_x: d.unlabeled_matrix()?,
                })
            })
            .collect::<std::result::Result<Vec<_>, TrainError>>()?;
        let config = ModelConfig {
            input_dim: 2,
            hidden_dims: vec![8],
            feature_dim: 6,
            num_classes: 2,
        };
        let params = ModelParams::init(&config, seed)?;
        // nonzero biases so no ReLU sits exactly on its kink
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let params = params.try_map(|_, t| {
            let data = t.data().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            Ok(Tensor::raw(t.shape().to_vec(), data))
        })?;
        let mut it = batches.into_iter();
        let train = vec![it.next().expect("3 domains"), it.next().expect("3 domains")];
        let test = vec![it.next().expect("3 domains")];
        Ok(Self {
            params,
            train,
            test,
            hp: HyperParams {
                alpha0: 0.1,
                beta0: 1.0,
                beta1: 1.0,
                ..HyperParams::default()
            },
        })
    }

    /// `l_meta-train + l_meta-test` at `params`.
    pub fn objective(&self, params: &ModelParams) -> std::result::Result<f64, TrainError> {
        let graph = Graph::new();
        let p = params.attach(&graph);
        let mt = meta_train_step(&p, &self.train, &self.hp)?;
        let ms = meta_test_step(&mt.inner, &self.train, &self.test, &self.hp)?;
        Ok(mt.loss.item() + ms.loss.item())
    }

    /// Analytic outer gradient at `params`, flattened in parameter order.
    pub fn gradient(&self, params: &ModelParams, second_order: bool) -> std::result::Result<Vec<f64>, TrainError> {
        let hp = HyperParams {
            second_order,
            ..self.hp.clone()
        };
        let graph = Graph::new();
        let p = params.attach(&graph);
        let mt = meta_train_step(&p, &self.train, &hp)?;
        let ms = meta_test_step(&mt.inner, &self.train, &self.test, &hp)?;
        let g = outer_gradient(&p, &mt.inner, &mt.loss, &ms.loss)?;
        Ok(g.iter().flat_map(|t| t.to_vec()).collect())
    }

    pub fn with_flat(&self, flat: &[f64]) -> ModelParams {
        let mut offset = 0;
        self.params
            .try_map(|_, t| {
                let n = t.numel();
                let v = Tensor::raw(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
                Ok(v)
            })
            .expect("shapes preserved")
    }
}

/// Second-order outer gradient against central differences on random small
/// networks.
pub fn check_meta(opts: &GradcheckOptions, networks: usize) -> std::result::Result<CheckResult, TrainError> {
    let mut worst: f64 = 0.0;
    for k in 0..networks {
        let problem = MetaProblem::new(opts.seed.wrapping_add(k as u64))?;
        let mut analytic = problem.gradient(&problem.params, true)?;
        fault(&mut analytic, opts.inject_fault);
        let flat: Vec<f64> = problem.params.tensors().flat_map(|t| t.to_vec()).collect();
        let mut err = None;
        let numeric = numeric_gradient(&flat, opts.step, |x| match problem.objective(&problem.with_flat(x)) {
            Ok(v) => Ok(v),
            Err(e) => {
                err = Some(e);
                Ok(f64::NAN)
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        name: "meta_gradient".into(),
        cases: networks,
        max_rel_error: worst,
        tolerance: opts.meta_tolerance,
    })
}

/// Op suite plus the meta-gradient check on three networks.
pub fn run(opts: &GradcheckOptions) -> std::result::Result<GradcheckReport, TrainError> {
    Ok(GradcheckReport {
        ops: check_ops(opts)?,
        meta: vec![check_meta(opts, 3)?],
    })
}
