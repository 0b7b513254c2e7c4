//! Entropy-minimization family: TENT, ETA, SAR and DeYO.

use super::config::{check_nonnegative, check_unit_interval};
use super::{
    selection_weights, Adapter, DeyoConfig, EtaConfig, GradCore, Model, Prediction, SarConfig,
    TentConfig,
};
use crate::encoders::{mix_seed, Views};
use crate::error::{Error, Result};
use crate::numerics::functional::cosine;
use crate::numerics::{argmax, Gradients, Graph, Tensor, Var};
use crate::streams::Batch;

/// Forward pass of a batch: probabilities, recorded entropies and their
/// values.
pub(crate) struct Scored {
    pub probs: Tensor,
    pub entropy: Var,
    pub values: Vec<f64>,
}

pub(crate) fn score(core: &mut GradCore, g: &mut Graph, ids: &[usize]) -> Result<Scored> {
    let p = core.forward(g, ids, &Views::Canonical)?;
    let entropy = g.entropy_rows(p)?;
    Ok(Scored {
        probs: g.value(p).clone(),
        entropy,
        values: g.value(entropy).data().to_vec(),
    })
}

/// Gradient of `Σ_i w_i e_i` for the recorded entropies.
pub(crate) fn weighted_gradient(g: &mut Graph, entropy: Var, weights: &[f64]) -> Result<Gradients> {
    let loss = g.weighted_sum(entropy, weights)?;
    Ok(g.backward(loss)?)
}

fn ln_classes(core: &GradCore) -> f64 {
    (core.model.head.num_classes() as f64).ln()
}

/// Entropy minimization on the whole batch.
pub struct Tent {
    pub(crate) core: GradCore,
    cfg: TentConfig,
}

impl Tent {
    pub fn new(model: Model, cfg: &TentConfig) -> Result<Self> {
        if let Some(f) = cfg.filter_factor {
            check_nonnegative("tent.filter_factor", f)?;
        }
        Ok(Self {
            core: GradCore::new(model, &cfg.optim(), "tent")?,
            cfg: cfg.clone(),
        })
    }

    pub(crate) fn selected(&self, entropies: &[f64]) -> Vec<usize> {
        match self.cfg.filter_factor {
            None => (0..entropies.len()).collect(),
            Some(f) => {
                let bound = f * ln_classes(&self.core);
                (0..entropies.len()).filter(|&i| entropies[i] < bound).collect()
            }
        }
    }
}

impl Adapter for Tent {
    fn name(&self) -> &'static str {
        "tent"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new();
        let s = score(&mut self.core, &mut g, &batch.ids)?;
        let sel = self.selected(&s.values);
        if !sel.is_empty() {
            let grads = weighted_gradient(&mut g, s.entropy, &selection_weights(batch.len(), &sel))?;
            self.core.step(&grads)?;
        }
        Ok(Prediction::from_probs(s.probs))
    }

    fn reset(&mut self) -> Result<()> {
        self.core.reset()
    }

    fn model(&self) -> &Model {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.core.model
    }
}

/// Reliability- and diversity-filtered, entropy-weighted minimization.
pub struct Eta {
    core: GradCore,
    cfg: EtaConfig,
    /// Moving average of accepted probability vectors.
    average: Option<Vec<f64>>,
}

impl Eta {
    pub fn new(model: Model, cfg: &EtaConfig) -> Result<Self> {
        check_nonnegative("eta.e0_factor", cfg.e0_factor)?;
        check_unit_interval("eta.diversity_momentum", cfg.diversity_momentum)?;
        Ok(Self {
            core: GradCore::new(model, &cfg.optim(), "eta")?,
            cfg: cfg.clone(),
            average: None,
        })
    }

    pub fn e0(&self) -> f64 {
        self.cfg.e0_factor * ln_classes(&self.core)
    }

    /// Surviving samples and their normalized loss weights.
    pub fn select(&self, probs: &Tensor, entropies: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let e0 = self.e0();
        let survivors: Vec<usize> = (0..entropies.len())
            .filter(|&i| entropies[i] < e0)
            .filter(|&i| match &self.average {
                Some(m) => cosine(probs.row(i), m) <= self.cfg.diversity_threshold,
                None => true,
            })
            .collect();
        let mut w = vec![0.0; entropies.len()];
        for &i in &survivors {
            w[i] = (e0 - entropies[i]).exp();
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        (survivors, w)
    }
}

impl Adapter for Eta {
    fn name(&self) -> &'static str {
        "eta"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new();
        let s = score(&mut self.core, &mut g, &batch.ids)?;
        let (survivors, w) = self.select(&s.probs, &s.values);
        if !survivors.is_empty() {
            let grads = weighted_gradient(&mut g, s.entropy, &w)?;
            self.core.step(&grads)?;
            let k = s.probs.cols();
            let mut mean = vec![0.0; k];
            for &i in &survivors {
                mean.iter_mut().zip(s.probs.row(i)).for_each(|(m, p)| *m += p);
            }
            mean.iter_mut().for_each(|m| *m /= survivors.len() as f64);
            let mu = self.cfg.diversity_momentum;
            self.average = Some(match self.average.take() {
                None => mean,
                Some(avg) => avg.iter().zip(&mean).map(|(a, b)| mu * a + (1.0 - mu) * b).collect(),
            });
        }
        Ok(Prediction::from_probs(s.probs))
    }

    fn reset(&mut self) -> Result<()> {
        self.average = None;
        self.core.reset()
    }

    fn model(&self) -> &Model {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.core.model
    }
}

/// Sharpness-aware, reliability-filtered entropy minimization with
/// recovery to the source model.
pub struct Sar {
    core: GradCore,
    cfg: SarConfig,
    loss_average: Option<f64>,
    resets: usize,
}

impl Sar {
    pub fn new(model: Model, cfg: &SarConfig) -> Result<Self> {
        check_nonnegative("sar.e0_factor", cfg.e0_factor)?;
        check_nonnegative("sar.rho_sam", cfg.rho_sam)?;
        check_unit_interval("sar.loss_momentum", cfg.loss_momentum)?;
        Ok(Self {
            core: GradCore::new(model, &cfg.optim(), "sar")?,
            cfg: cfg.clone(),
            loss_average: None,
            resets: 0,
        })
    }

    /// Number of recoveries to the source state so far.
    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn loss_average(&self) -> Option<f64> {
        self.loss_average
    }

    /// Overrides the running loss average and applies the recovery rule.
    pub fn set_loss_average(&mut self, value: f64) -> Result<()> {
        self.loss_average = Some(value);
        self.maybe_recover()
    }

    fn maybe_recover(&mut self) -> Result<()> {
        if matches!(self.loss_average, Some(v) if v < self.cfg.reset_threshold) {
            self.core.reset()?;
            self.loss_average = None;
            self.resets += 1;
        }
        Ok(())
    }

    /// Gradient at the ascended point `θ + ρ g/‖g‖`, plus the loss there.
    fn sharpness_gradient(
        &mut self,
        ids: &[usize],
        weights: &[f64],
        grads: &Gradients,
    ) -> Result<Option<(Gradients, f64)>> {
        let norm = grads.norm(Some(&self.core.ids));
        if self.cfg.rho_sam == 0.0 || norm == 0.0 {
            return Ok(None);
        }
        let scale = self.cfg.rho_sam / norm;
        let params = self.core.model.encoder.params_mut().expect("trainable");
        let saved: Vec<Tensor> = self.core.ids.iter().map(|&id| params.value(id).clone()).collect();
        for &id in &self.core.ids {
            let gr = grads.get(id).expect("scoped gradient").data();
            params
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .zip(gr)
                .for_each(|(w, g)| *w += scale * g);
        }
        let mut g = Graph::new();
        let outcome = score(&mut self.core, &mut g, ids).and_then(|s| {
            let loss = g.weighted_sum(s.entropy, weights)?;
            let value = g.value(loss).item();
            Ok((g.backward(loss)?, value))
        });
        let params = self.core.model.encoder.params_mut().expect("trainable");
        for (&id, t) in self.core.ids.iter().zip(saved) {
            *params.value_mut(id) = t;
        }
        outcome.map(Some)
    }
}

impl Adapter for Sar {
    fn name(&self) -> &'static str {
        "sar"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new();
        let s = score(&mut self.core, &mut g, &batch.ids)?;
        let e0 = self.cfg.e0_factor * ln_classes(&self.core);
        let sel: Vec<usize> = (0..s.values.len()).filter(|&i| s.values[i] < e0).collect();
        if sel.is_empty() {
            return Ok(Prediction::from_probs(s.probs));
        }
        let w = selection_weights(batch.len(), &sel);
        let loss = g.weighted_sum(s.entropy, &w)?;
        let first = g.backward(loss)?;
        let (grads, value) = match self.sharpness_gradient(&batch.ids, &w, &first)? {
            Some(pair) => pair,
            None => (first, g.value(loss).item()),
        };
        self.core.step(&grads)?;
        let mu = self.cfg.loss_momentum;
        self.loss_average = Some(match self.loss_average {
            None => value,
            Some(a) => mu * a + (1.0 - mu) * value,
        });
        self.maybe_recover()?;
        Ok(Prediction::from_probs(s.probs))
    }

    fn reset(&mut self) -> Result<()> {
        self.loss_average = None;
        self.resets = 0;
        self.core.reset()
    }

    fn model(&self) -> &Model {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.core.model
    }
}

/// Samples with `e_i < entropy_bound` and `plpd_i > plpd_threshold`.
pub fn deyo_kept(
    entropies: &[f64],
    plpd: &[f64],
    entropy_bound: f64,
    plpd_threshold: f64,
) -> Vec<usize> {
    (0..entropies.len())
        .filter(|&i| entropies[i] < entropy_bound && plpd[i] > plpd_threshold)
        .collect()
}

/// Entropy minimization on samples whose pseudo-label loses probability
/// once the input's structure is destroyed.
pub struct Deyo {
    pub(crate) core: GradCore,
    cfg: DeyoConfig,
    seed: u64,
}

impl Deyo {
    pub fn new(model: Model, cfg: &DeyoConfig, seed: u64) -> Result<Self> {
        if !model.encoder.capabilities().raw_input {
            return Err(Error::Unsupported(
                "deyo transforms raw inputs; embedding tables have none".into(),
            ));
        }
        if cfg.block_size == 0 {
            return Err(Error::Config("deyo.block_size must be at least 1".into()));
        }
        if cfg.entropy_factor.is_nan() {
            return Err(Error::Config("deyo.entropy_factor is NaN".into()));
        }
        Ok(Self {
            core: GradCore::new(model, &cfg.optim(), "deyo")?,
            cfg: cfg.clone(),
            seed,
        })
    }

    fn views(&self) -> Views {
        Views::ShapeDestroyed {
            block_size: self.cfg.block_size,
            seed: mix_seed(self.seed, 0xDE70_0001),
        }
    }

    /// Pseudo-label probability drop of every sample, given its
    /// probabilities on the untouched input.
    pub fn plpd(&mut self, ids: &[usize], probs: &Tensor) -> Result<Vec<f64>> {
        let views = self.views();
        let z = self.core.model.encoder.embed(ids, &views, self.core.mode)?;
        let shuffled = self.core.model.head.probabilities_of(&z)?;
        Ok(probs
            .iter_rows()
            .zip(shuffled.iter_rows())
            .map(|(p, q)| {
                let y = argmax(p);
                p[y] - q[y]
            })
            .collect())
    }

    pub(crate) fn kept(&mut self, ids: &[usize], s: &Scored) -> Result<Vec<usize>> {
        let plpd = self.plpd(ids, &s.probs)?;
        let bound = self.cfg.entropy_factor * ln_classes(&self.core);
        Ok(deyo_kept(&s.values, &plpd, bound, self.cfg.plpd_threshold))
    }
}

impl Adapter for Deyo {
    fn name(&self) -> &'static str {
        "deyo"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let mut g = Graph::new();
        let s = score(&mut self.core, &mut g, &batch.ids)?;
        let kept = self.kept(&batch.ids, &s)?;
        if !kept.is_empty() {
            let grads =
                weighted_gradient(&mut g, s.entropy, &selection_weights(batch.len(), &kept))?;
            self.core.step(&grads)?;
        }
        Ok(Prediction::from_probs(s.probs))
    }

    fn reset(&mut self) -> Result<()> {
        self.core.reset()
    }

    fn model(&self) -> &Model {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.core.model
    }
}
