//! Built-in multi-domain benchmark.
//!
//! Class means are random unit vectors; a clean sample is its class mean
//! plus isotropic Gaussian spread, normalized. Every corrupted domain
//! transforms the same clean base samples, so domains differ only in the
//! corruption applied.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{mask_coordinates, mix_seed, RawDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    Clean,
    /// Additive Gaussian noise of norm about `σ` (inputs are unit norm).
    Gauss(f64),
    /// Zeroes a fraction of coordinates.
    Mask(f64),
    /// Rotates by a fraction of the angles of a fixed random rotation.
    Rotate(f64),
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::Clean => f.write_str("clean"),
            Corruption::Gauss(s) => write!(f, "gauss:{s}"),
            Corruption::Mask(m) => write!(f, "mask:{m}"),
            Corruption::Rotate(a) => write!(f, "rotate:{a}"),
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown domain `{s}`"));
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let level = || -> Result<f64> {
            let v: f64 = arg.ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("domain `{s}` needs a level ≥ 0")));
            }
            Ok(v)
        };
        match kind.trim() {
            "clean" if arg.is_none() => Ok(Corruption::Clean),
            "gauss" => Ok(Corruption::Gauss(level()?)),
            "mask" => {
                let m = level()?;
                if m > 1.0 {
                    return Err(Error::Config(format!("mask fraction {m} exceeds 1")));
                }
                Ok(Corruption::Mask(m))
            }
            "rotate" => Ok(Corruption::Rotate(level()?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Corruption {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Corruption {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub d_in: usize,
    pub samples_per_domain: usize,
    /// Per-coordinate standard deviation of the class spread.
    pub sigma_cluster: f64,
    pub domains: Vec<Corruption>,
    /// Clean samples per class used to train the source encoder.
    pub train_per_class: usize,
    /// Clean samples per class used to build the prototypes.
    pub heldout_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            d_in: 64,
            samples_per_domain: 2000,
            sigma_cluster: 0.25,
            domains: vec![
                Corruption::Clean,
                Corruption::Gauss(0.3),
                Corruption::Gauss(0.6),
                Corruption::Mask(0.3),
                Corruption::Rotate(0.5),
            ],
            train_per_class: 300,
            heldout_per_class: 50,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.d_in < 2 {
            return Err(Error::Config("synthetic inputs need d_in ≥ 2".into()));
        }
        if self.samples_per_domain == 0 || self.domains.is_empty() {
            return Err(Error::Config("synthetic test set would be empty".into()));
        }
        if self.train_per_class == 0 || self.heldout_per_class == 0 {
            return Err(Error::Config("train and held-out splits must be non-empty".into()));
        }
        if !(self.sigma_cluster >= 0.0) || !self.sigma_cluster.is_finite() {
            return Err(Error::Config("sigma_cluster must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Expected half-distance between two random class means in units of
    /// the class spread along the line joining them.
    pub fn separation(&self) -> f64 {
        if self.sigma_cluster == 0.0 {
            return f64::INFINITY;
        }
        1.0 / (self.sigma_cluster * std::f64::consts::SQRT_2)
    }

    /// A warning when classes are expected to overlap heavily. Heavy
    /// overlap is allowed, it just makes every method look alike.
    pub fn overlap_warning(&self) -> Option<String> {
        let s = self.separation();
        (s < 1.5).then(|| {
            format!(
                "sigma_cluster = {} gives a class separation of {s:.2} spreads; \
                 with {} classes expect heavy overlap",
                self.sigma_cluster, self.num_classes
            )
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub class_means: Tensor,
    pub train: RawDataset,
    pub heldout: RawDataset,
    pub test: RawDataset,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Orthonormal basis from Gram–Schmidt on Gaussian vectors (rows).
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// A rotation given as planes `(u, v)` of an orthonormal basis, each turned
/// by its own angle; a trailing odd axis is left fixed.
struct PlaneRotation {
    planes: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl PlaneRotation {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let basis = random_orthonormal(rng, d);
        let planes = basis
            .chunks_exact(2)
            .map(|p| (p[0].clone(), p[1].clone(), rng.random_range(-PI..PI)))
            .collect();
        Self { planes }
    }

    /// Applies the rotation with every angle scaled by `fraction`.
    fn apply(&self, x: &[f64], fraction: f64) -> Vec<f64> {
        let mut out = x.to_vec();
        for (u, v, theta) in &self.planes {
            let a: f64 = x.iter().zip(u).map(|(p, q)| p * q).sum();
            let b: f64 = x.iter().zip(v).map(|(p, q)| p * q).sum();
            let (s, c) = (fraction * theta).sin_cos();
            let (a2, b2) = (c * a - s * b, s * a + c * b);
            for i in 0..x.len() {
                out[i] += (a2 - a) * u[i] + (b2 - b) * v[i];
            }
        }
        out
    }
}

fn draw_samples(
    means: &Tensor,
    per_class: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let k = means.rows();
    let d = means.cols();
    let mut labels: Vec<usize> = (0..per_class * k).map(|i| i % k).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(labels.len() * d);
    for &c in &labels {
        let mut x: Vec<f64> = means.row(c).to_vec();
        for v in x.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sigma * e;
        }
        normalize(&mut x);
        data.extend(x);
    }
    (data, labels)
}

fn corrupt(
    x: &[f64],
    c: Corruption,
    rotation: &PlaneRotation,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match c {
        Corruption::Clean => x.to_vec(),
        Corruption::Gauss(s) => {
            let scale = s / (x.len() as f64).sqrt();
            x.iter()
                .map(|&v| v + scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        Corruption::Mask(m) => {
            let mut out = x.to_vec();
            mask_coordinates(&mut out, m, rng);
            out
        }
        Corruption::Rotate(a) => rotation.apply(x, a),
    }
}

/// Builds the benchmark for `seed`: a clean training split, a clean
/// held-out split for prototypes, and one test domain per corruption.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticWorld> {
    spec.validate()?;
    let (k, d) = (spec.num_classes, spec.d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED_0001));
    let mut means = Vec::with_capacity(k * d);
    for _ in 0..k {
        let mut m = gaussian_vec(&mut rng, d);
        normalize(&mut m);
        means.extend(m);
    }
    let class_means = Tensor::matrix(k, d, means)?;
    let class_names: Vec<String> = (0..k).map(|i| format!("class_{i}")).collect();

    let split = |per_class: usize, salt: u64, name: &str| -> Result<RawDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt));
        let (data, labels) = draw_samples(&class_means, per_class, spec.sigma_cluster, &mut rng);
        Ok(RawDataset {
            inputs: Tensor::matrix(labels.len(), d, data)?,
            domain_ids: vec![0; labels.len()],
            labels,
            class_names: class_names.clone(),
            domain_names: vec![name.to_string()],
        })
    };
    let train = split(spec.train_per_class, 0x5EED_0002, "train")?;
    let heldout = split(spec.heldout_per_class, 0x5EED_0003, "heldout")?;

    // shared clean base for every test domain
    let mut base_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED_0004));
    let per_class = spec.samples_per_domain.div_ceil(k);
    let (mut base, mut base_labels) =
        draw_samples(&class_means, per_class, spec.sigma_cluster, &mut base_rng);
    base.truncate(spec.samples_per_domain * d);
    base_labels.truncate(spec.samples_per_domain);

    let mut rot_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED_0005));
    let rotation = PlaneRotation::random(&mut rot_rng, d);

    let n = spec.samples_per_domain;
    let mut data = Vec::with_capacity(n * d * spec.domains.len());
    let mut labels = Vec::with_capacity(n * spec.domains.len());
    let mut domain_ids = Vec::with_capacity(n * spec.domains.len());
    for (di, &c) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED_0100 + di as u64));
        for (i, x) in base.chunks_exact(d).enumerate() {
            data.extend(corrupt(x, c, &rotation, &mut rng));
            labels.push(base_labels[i]);
            domain_ids.push(di);
        }
    }
    let test = RawDataset {
        inputs: Tensor::matrix(labels.len(), d, data)?,
        labels,
        domain_ids,
        class_names,
        domain_names: spec.domains.iter().map(ToString::to_string).collect(),
    };
    Ok(SyntheticWorld {
        class_means,
        train,
        heldout,
        test,
    })
}
