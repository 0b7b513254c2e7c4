//! Input-space transforms: multi-view augmentation and the block
//! permutation used as a shape-destroying transform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Per-view augmentation recipe.
///
/// Noise is scale-relative: each coordinate receives `N(0, (σ·rms(x))²)`,
/// so the noise vector has norm close to `σ·‖x‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub mask_fraction: f64,
    /// Log-uniform multiplicative range; `None` (an empty list in config
    /// files) disables scaling.
    #[serde(deserialize_with = "scale_range_from_list")]
    pub scale_range: Option<(f64, f64)>,
}

fn scale_range_from_list<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> Result<Option<(f64, f64)>, D::Error> {
    let v: Option<Vec<f64>> = Option::deserialize(d)?;
    match v.as_deref() {
        None | Some([]) => Ok(None),
        Some(&[lo, hi]) if lo > 0.0 && lo <= hi => Ok(Some((lo, hi))),
        Some(other) => Err(serde::de::Error::custom(format!(
            "scale_range must be empty or [lo, hi] with 0 < lo ≤ hi, got {other:?}"
        ))),
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_fraction: 0.1,
            scale_range: Some((0.8, 1.25)),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_fraction: 0.0,
            scale_range: None,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn add_relative_noise<R: Rng + ?Sized>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 || x.is_empty() {
        return;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let std = sigma * rms;
    for v in x.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += std * e;
    }
}

/// Zeroes `round(fraction · d)` randomly chosen coordinates.
pub fn mask_coordinates<R: Rng + ?Sized>(x: &mut [f64], fraction: f64, rng: &mut R) {
    let n = ((fraction * x.len() as f64).round() as usize).min(x.len());
    if n == 0 {
        return;
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, n);
    for &i in chosen.iter() {
        x[i] = 0.0;
    }
}

fn augment_row(x: &[f64], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    add_relative_noise(&mut out, cfg.noise_std, rng);
    mask_coordinates(&mut out, cfg.mask_fraction, rng);
    if let Some((lo, hi)) = cfg.scale_range {
        let s = rng.random_range(lo.ln()..=hi.ln()).exp();
        out.iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Expands every input row into `n_views` rows (sample-major). View 0 is the
/// input itself; view `v` of row `i` depends only on `(seed, i, v)`.
pub fn augment(inputs: &Tensor, n_views: usize, cfg: &AugmentConfig, seed: u64) -> Tensor {
    assert!(n_views >= 1, "n_views must be at least 1");
    let d = inputs.cols();
    let mut data = Vec::with_capacity(inputs.rows() * n_views * d);
    for (i, row) in inputs.iter_rows().enumerate() {
        data.extend_from_slice(row);
        for v in 1..n_views {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, i as u64), v as u64));
            data.extend(augment_row(row, cfg, &mut rng));
        }
    }
    Tensor::matrix(inputs.rows() * n_views, d, data).expect("rows·views·d elements")
}

/// Splits each row into contiguous blocks of `block_size` (the last block
/// may be shorter) and reorders the blocks by a random permutation. The
/// multiset of values in every row is preserved.
pub fn shape_destroying_transform(inputs: &Tensor, block_size: usize, seed: u64) -> Tensor {
    assert!(block_size >= 1, "block_size must be at least 1");
    let d = inputs.cols();
    let n_blocks = d.div_ceil(block_size);
    let mut out = Tensor::zeros(inputs.shape());
    for (i, row) in inputs.iter_rows().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let mut order: Vec<usize> = (0..n_blocks).collect();
        order.shuffle(&mut rng);
        let target = out.row_mut(i);
        let mut pos = 0;
        for b in order {
            let start = b * block_size;
            let end = (start + block_size).min(d);
            target[pos..pos + end - start].copy_from_slice(&row[start..end]);
            pos += end - start;
        }
    }
    out
}
