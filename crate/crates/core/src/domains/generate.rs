use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainCollection, DomainDataset, GenerationMeta, LabeledSample, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoonsSpec {
    /// Rotation of each domain in degrees; one domain per entry.
    pub rotations: Vec<f64>,
    pub samples_per_domain: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for MoonsSpec {
    fn default() -> Self {
        Self {
            rotations: vec![0.0, 30.0, 60.0, 90.0],
            samples_per_domain: 200,
            noise_sd: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussiansSpec {
    pub num_classes: usize,
    /// Translation of each domain along the diagonal; one domain per entry.
    pub translations: Vec<f64>,
    pub samples_per_domain: usize,
    pub class_separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for GaussiansSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            translations: vec![0.0, 1.0, 2.0, 3.0],
            samples_per_domain: 150,
            class_separation: 3.0,
            noise_sd: 0.5,
            seed: 7,
        }
    }
}

fn domain_rng(seed: u64, domain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64);
    rng
}

fn noise(sd: f64) -> Result<Normal<f64>> {
    if !(sd.is_finite() && sd >= 0.0) {
        return Err(DataError::Config(format!("noise sd must be finite and >= 0, got {sd}")));
    }
    Normal::new(0.0, sd).map_err(|e| DataError::Config(e.to_string()))
}

/// Two interleaving half circles per domain, centred on the origin, rotated
/// by the domain's angle, plus isotropic Gaussian noise. Class 0 is the outer
/// arc, class 1 the inner one; both get exactly half the samples.
pub fn generate_rotated_moons(spec: &MoonsSpec) -> Result<DomainCollection> {
    let n = spec.samples_per_domain;
    if spec.rotations.len() < 2 {
        return Err(DataError::Config("need at least 2 domains".into()));
    }
    if n < 4 || !n.is_multiple_of(2) {
        return Err(DataError::Config(format!(
            "samples per domain must be even and at least 4, got {n}"
        )));
    }
    let normal = noise(spec.noise_sd)?;
    let per_class = n / 2;
    let arc = |i: usize| PI * i as f64 / (per_class - 1) as f64;

    let mut domains = Vec::with_capacity(spec.rotations.len());
    for (id, &deg) in spec.rotations.iter().enumerate() {
        let mut rng = domain_rng(spec.seed, id);
        let (s, c) = deg.to_radians().sin_cos();
        let mut labeled = Vec::with_capacity(n);
        for class in 0..2 {
            for i in 0..per_class {
                let t = arc(i);
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let (x, y) = (x - 0.5, y - 0.25);
                let (rx, ry) = (c * x - s * y, s * x + c * y);
                labeled.push(LabeledSample {
                    features: vec![rx + normal.sample(&mut rng), ry + normal.sample(&mut rng)],
                    label: class,
                });
            }
        }
        domains.push(DomainDataset::new(id, labeled, Vec::new()));
    }
    Ok(DomainCollection {
        domains,
        num_classes: 2,
        input_dim: 2,
        meta: GenerationMeta {
            generator: "moons".into(),
            shifts: spec.rotations.clone(),
            seed: spec.seed,
            noise_sd: spec.noise_sd,
            samples_per_domain: n,
            class_separation: None,
        },
    })
}

/// Class centre `c` of the gaussian generator: a point on the circle of
/// radius `separation`, at angle `2 pi c / C`.
pub(crate) fn gaussian_center(class: usize, classes: usize, separation: f64, translation: f64) -> [f64; 2] {
    let a = 2.0 * PI * class as f64 / classes as f64;
    let shift = translation / 2f64.sqrt();
    [separation * a.cos() + shift, separation * a.sin() + shift]
}

/// Isotropic 2-D gaussian blobs, one per class, laid out evenly on a circle
/// and translated per domain along `(1, 1) / sqrt(2)`. Class sizes differ by at
/// most one.
pub fn generate_shifted_gaussians(spec: &GaussiansSpec) -> Result<DomainCollection> {
    let classes = spec.num_classes;
    let n = spec.samples_per_domain;
    if classes < 2 {
        return Err(DataError::Config("need at least 2 classes".into()));
    }
    if spec.translations.len() < 2 {
        return Err(DataError::Config("need at least 2 domains".into()));
    }
    if n < 2 * classes {
        return Err(DataError::Config(format!(
            "samples per domain must be at least {}, got {n}",
            2 * classes
        )));
    }
    if !spec.class_separation.is_finite() {
        return Err(DataError::Config("class separation must be finite".into()));
    }
    let normal = noise(spec.noise_sd)?;

    let mut domains = Vec::with_capacity(spec.translations.len());
    for (id, &shift) in spec.translations.iter().enumerate() {
        let mut rng = domain_rng(spec.seed, id);
        let mut labeled = Vec::with_capacity(n);
        for class in 0..classes {
            let count = n / classes + usize::from(class < n % classes);
            let center = gaussian_center(class, classes, spec.class_separation, shift);
            for _ in 0..count {
                labeled.push(LabeledSample {
                    features: center.iter().map(|&m| m + normal.sample(&mut rng)).collect(),
                    label: class,
                });
            }
        }
        domains.push(DomainDataset::new(id, labeled, Vec::new()));
    }
    Ok(DomainCollection {
        domains,
        num_classes: classes,
        input_dim: 2,
        meta: GenerationMeta {
            generator: "gaussians".into(),
            shifts: spec.translations.clone(),
            seed: spec.seed,
            noise_sd: spec.noise_sd,
            samples_per_domain: n,
            class_separation: Some(spec.class_separation),
        },
    })
}
