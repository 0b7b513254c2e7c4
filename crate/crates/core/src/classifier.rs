//! Zero-shot head: cosine similarities to class prototypes act as logits,
//! scaled by an inverse temperature and passed through a softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::functional::{l2_normalize_rows, softmax_rows};
use crate::numerics::{argmax, Graph, NumericsError, Tensor, Var};
use crate::prototypes::PrototypeSet;

/// CLIP's logit scale.
pub const DEFAULT_INV_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct ZeroShotHead {
    prototypes: PrototypeSet,
    inv_temperature: f64,
    // D × K, cached for the similarity matmul
    prototypes_t: Tensor,
}

impl ZeroShotHead {
    pub fn new(prototypes: PrototypeSet, inv_temperature: f64) -> Result<Self> {
        if !(inv_temperature > 0.0) || !inv_temperature.is_finite() {
            return Err(Error::Config(format!(
                "inverse temperature must be positive, got {inv_temperature}"
            )));
        }
        let prototypes_t = prototypes.matrix().transpose()?;
        Ok(Self {
            prototypes,
            inv_temperature,
            prototypes_t,
        })
    }

    pub fn prototypes(&self) -> &PrototypeSet {
        &self.prototypes
    }

    pub fn inv_temperature(&self) -> f64 {
        self.inv_temperature
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }

    /// Cosine similarity of every embedding row to every prototype.
    pub fn similarities(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "similarities",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim()],
            }
            .into());
        }
        let zn = l2_normalize_rows(z)?;
        let mut g = Graph::new();
        let a = g.constant(zn);
        let b = g.constant(self.prototypes_t.clone());
        let s = g.matmul(a, b)?;
        let mut sims = g.value(s).clone();
        // rounding can push |cos| a hair past 1
        sims.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(sims)
    }

    /// Row-wise softmax of `inv_temperature · similarities`.
    pub fn probabilities(&self, sims: &Tensor) -> Tensor {
        softmax_rows(&sims.map(|s| s * self.inv_temperature))
    }

    /// Class probabilities of raw embeddings. Shares its arithmetic with
    /// [`Self::probabilities_var`], so recorded and direct evaluation agree
    /// bit for bit.
    pub fn probabilities_of(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "probabilities_of",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim()],
            }
            .into());
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = self.probabilities_var(&mut g, zv)?;
        Ok(g.value(p).clone())
    }

    /// Recorded version of `probabilities ∘ similarities`.
    pub fn probabilities_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let protos_t = g.constant(self.prototypes_t.clone());
        probabilities_with(g, z, protos_t, self.inv_temperature)
    }
}

/// `softmax(s · normalize(z) · P)` for a `D × K` prototype operand `P`.
pub(crate) fn probabilities_with(
    g: &mut Graph,
    z: Var,
    prototypes_t: Var,
    inv_temperature: f64,
) -> Result<Var> {
    let zn = g.l2_normalize(z)?;
    let sims = g.matmul(zn, prototypes_t)?;
    let logits = g.scale(sims, inv_temperature)?;
    Ok(g.softmax(logits)?)
}

/// Arg-max class per row, ties to the lowest index.
pub fn predict(probs: &Tensor) -> Vec<usize> {
    probs.iter_rows().map(argmax).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep the ⌊ρB⌋ lowest-entropy samples.
    TopFraction(f64),
    /// Keep samples with entropy at most β.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRule {
    pub mode: FilterMode,
    pub minimum_kept: usize,
}

impl FilterRule {
    pub fn top_fraction(rho: f64) -> Self {
        Self {
            mode: FilterMode::TopFraction(rho),
            minimum_kept: 1,
        }
    }

    pub fn threshold(beta: f64) -> Self {
        Self {
            mode: FilterMode::Threshold(beta),
            minimum_kept: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            FilterMode::TopFraction(rho) if !(rho > 0.0 && rho <= 1.0) => {
                Err(Error::Config(format!("filter fraction {rho} not in (0, 1]")))
            }
            FilterMode::Threshold(beta) if beta.is_nan() || beta < 0.0 => {
                Err(Error::Config(format!("filter threshold {beta} must be ≥ 0")))
            }
            _ if self.minimum_kept == 0 => Err(Error::Config("minimum_kept must be ≥ 1".into())),
            _ => Ok(()),
        }
    }
}

/// Indices of the most confident samples, in ascending index order.
///
/// Ranking is by entropy with ties broken by index. At least
/// `minimum_kept` samples are returned whenever the batch has that many.
pub fn confidence_filter(entropies: &[f64], rule: &FilterRule) -> Vec<usize> {
    let b = entropies.len();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| entropies[i].total_cmp(&entropies[j]).then(i.cmp(&j)));
    let floor = rule.minimum_kept.min(b);
    let mut kept: Vec<usize> = match rule.mode {
        FilterMode::TopFraction(rho) => {
            let k = ((rho * b as f64).floor() as usize).max(floor).min(b);
            order[..k].to_vec()
        }
        FilterMode::Threshold(beta) => {
            let passing: Vec<usize> = (0..b).filter(|&i| entropies[i] <= beta).collect();
            if passing.len() >= floor {
                passing
            } else {
                order[..floor].to_vec()
            }
        }
    };
    kept.sort_unstable();
    kept
}
