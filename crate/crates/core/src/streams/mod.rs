//! Test streams under the continual, correlated and mixed protocols.

mod synthetic;

pub use synthetic::{generate_synthetic, Corruption, SyntheticSpec, SyntheticWorld};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Continual,
    Correlated,
    Mixed,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Continual => "continual",
            Scenario::Correlated => "correlated",
            Scenario::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub scenario: Scenario,
    /// Domains in visiting order; empty means every domain in id order.
    pub domain_order: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::Continual,
            domain_order: Vec::new(),
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// One time step of a stream. In continual and correlated streams `domain`
/// is the single domain of every sample; mixed batches report the domain of
/// each sample through `domains`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub index: usize,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The domain shared by all samples, if there is one.
    pub fn domain(&self) -> Option<usize> {
        let first = *self.domains.first()?;
        self.domains.iter().all(|&d| d == first).then_some(first)
    }
}

fn resolve_order(spec: &StreamSpec, n_domains: usize) -> Result<Vec<usize>> {
    if spec.batch_size == 0 {
        return Err(Error::Stream("batch_size must be at least 1".into()));
    }
    let order = if spec.domain_order.is_empty() {
        (0..n_domains).collect()
    } else {
        spec.domain_order.clone()
    };
    if let Some(&d) = order.iter().find(|&&d| d >= n_domains) {
        return Err(Error::Stream(format!(
            "domain {d} does not exist ({n_domains} domains)"
        )));
    }
    let mut seen = vec![false; n_domains];
    for &d in &order {
        if std::mem::replace(&mut seen[d], true) {
            return Err(Error::Stream(format!("domain {d} listed twice")));
        }
    }
    Ok(order)
}

fn members(domain_ids: &[usize], domain: usize) -> Result<Vec<usize>> {
    let m: Vec<usize> = (0..domain_ids.len())
        .filter(|&i| domain_ids[i] == domain)
        .collect();
    if m.is_empty() {
        return Err(Error::Stream(format!("domain {domain} has no samples")));
    }
    Ok(m)
}

fn batches_of(
    segments: Vec<Vec<usize>>,
    batch_size: usize,
    labels: &[usize],
    domain_ids: &[usize],
) -> Vec<Batch> {
    let mut out = Vec::new();
    for seg in segments {
        for chunk in seg.chunks(batch_size) {
            out.push(Batch {
                index: out.len(),
                labels: chunk.iter().map(|&i| labels[i]).collect(),
                domains: chunk.iter().map(|&i| domain_ids[i]).collect(),
                ids: chunk.to_vec(),
            });
        }
    }
    out
}

/// Builds the batch sequence for `spec`. `labels` and `domain_ids` describe
/// every sample of the dataset.
pub fn build_stream(
    labels: &[usize],
    domain_ids: &[usize],
    n_domains: usize,
    spec: &StreamSpec,
) -> Result<Vec<Batch>> {
    if labels.len() != domain_ids.len() {
        return Err(Error::Stream("labels and domain ids differ in length".into()));
    }
    let order = resolve_order(spec, n_domains)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let segments = match spec.scenario {
        Scenario::Continual => order
            .iter()
            .map(|&d| {
                let mut m = members(domain_ids, d)?;
                m.shuffle(&mut rng);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?,
        Scenario::Correlated => order
            .iter()
            .map(|&d| {
                let mut m = members(domain_ids, d)?;
                // stable, so equal labels keep index order
                m.sort_by_key(|&i| labels[i]);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?,
        Scenario::Mixed => {
            if order.len() < 2 {
                return Err(Error::Stream(
                    "mixed streams need at least two domains".into(),
                ));
            }
            let mut pool = Vec::new();
            for &d in &order {
                pool.extend(members(domain_ids, d)?);
            }
            pool.shuffle(&mut rng);
            vec![pool]
        }
    };
    Ok(batches_of(segments, spec.batch_size, labels, domain_ids))
}
