//! ROID and CMF: certainty/diversity-weighted entropy minimization, kept
//! near the source model by weight ensembling (ROID) or by a Kalman filter
//! over the parameters (CMF).

use super::config::{check_nonnegative, check_unit_interval};
use super::entropy::{score, weighted_gradient};
use super::{Adapter, CmfConfig, GradCore, Model, Prediction, PriorForm, RoidConfig};
use crate::error::{Error, Result};
use crate::numerics::functional::{cosine, row_entropy};
use crate::numerics::{Graph, NumericsError, ParamId, ParamSet, Tensor};
use crate::streams::Batch;

/// Below this total the batch is treated as collapsed and gets no weight.
const COLLAPSE_TOL: f64 = 1e-9;

/// Per-sample `w_cert · w_div` in `[0, 1]`, before any rescaling.
///
/// `w_cert = 1 − e/ln K` and `w_div = 1 − cos(p_i, p̄)` with `p̄` the batch
/// mean.
pub fn certainty_diversity_raw(probs: &Tensor) -> Vec<f64> {
    let (b, k) = (probs.rows(), probs.cols());
    if b == 0 {
        return Vec::new();
    }
    let ln_k = (k as f64).ln();
    let mut mean = vec![0.0; k];
    for row in probs.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let w: Vec<f64> = probs
        .iter_rows()
        .map(|p| {
            let cert = (1.0 - row_entropy(p) / ln_k).clamp(0.0, 1.0);
            let div = (1.0 - cosine(p, &mean)).max(0.0);
            cert * div
        })
        .collect();
    if w.iter().sum::<f64>() <= COLLAPSE_TOL {
        return vec![0.0; b];
    }
    w
}

/// [`certainty_diversity_raw`] rescaled to sum to `B`. A batch whose rows
/// all agree with their mean gets all-zero weights.
pub fn certainty_diversity_weights(probs: &Tensor) -> Vec<f64> {
    let mut w = certainty_diversity_raw(probs);
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        let b = w.len() as f64;
        w.iter_mut().for_each(|x| *x *= b / total);
    }
    w
}

/// `θ ← λ θ_src + (1 − λ) θ` on the parameters in `ids`, written as
/// `θ + λ(θ_src − θ)` so a parameter equal to its source stays exact.
pub fn weight_ensemble(
    source: &ParamSet,
    current: &mut ParamSet,
    ids: &[ParamId],
    lambda_src: f64,
) -> Result<()> {
    check_unit_interval("lambda_src", lambda_src)?;
    current.check_compatible(source)?;
    for &id in ids {
        let src = source.value(id).data();
        current
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .zip(src)
            .for_each(|(c, s)| *c += lambda_src * (s - *c));
    }
    Ok(())
}

/// Class-prior state used to correct label-correlated predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    form: PriorForm,
    prior: Vec<f64>,
    momentum: f64,
}

fn batch_mean(probs: &Tensor) -> Vec<f64> {
    let b = probs.rows().max(1) as f64;
    let mut mean = vec![0.0; probs.cols()];
    for row in probs.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, p)| *m += p / b);
    }
    mean
}

fn reweight(probs: &Tensor, factor: impl Fn(usize) -> f64) -> Tensor {
    let mut out = probs.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        row.iter_mut().enumerate().for_each(|(k, p)| *p *= factor(k));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    out
}

/// Batch prior `π` smoothed towards uniform by
/// `s = max(1/B, 1/K) / max π`: `π̃ = (π + s) / (1 + K s)`.
pub fn smoothed_batch_prior(probs: &Tensor) -> Vec<f64> {
    let (b, k) = (probs.rows().max(1) as f64, probs.cols() as f64);
    let prior = batch_mean(probs);
    let top = prior.iter().copied().fold(0.0, f64::max);
    let s = (1.0 / b).max(1.0 / k) / top;
    prior.iter().map(|p| (p + s) / (1.0 + k * s)).collect()
}

impl PriorState {
    pub fn new(form: PriorForm, classes: usize, momentum: f64) -> Result<Self> {
        check_unit_interval("prior_momentum", momentum)?;
        if classes == 0 {
            return Err(Error::Config("prior over zero classes".into()));
        }
        Ok(Self {
            form,
            prior: vec![1.0 / classes as f64; classes],
            momentum,
        })
    }

    /// Running form with a uniform start.
    pub fn uniform(classes: usize, momentum: f64) -> Result<Self> {
        Self::new(PriorForm::Running, classes, momentum)
    }

    pub fn form(&self) -> PriorForm {
        self.form
    }

    /// Running prior `p̄`; only the running form updates it.
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Corrected probabilities, leaving the state untouched.
    pub fn apply(&self, probs: &Tensor) -> Tensor {
        match self.form {
            PriorForm::Running => {
                let floor = 1.0 / self.prior.len() as f64;
                reweight(probs, |k| 1.0 / (self.prior[k] + floor))
            }
            PriorForm::Batch => {
                let pi = smoothed_batch_prior(probs);
                reweight(probs, |k| pi[k])
            }
        }
    }

    /// Corrects `probs`, then folds their batch mean into the running prior.
    pub fn correct(&mut self, probs: &Tensor) -> Tensor {
        let q = self.apply(probs);
        if self.form == PriorForm::Running {
            let mean = batch_mean(&q);
            let mu = self.momentum;
            self.prior
                .iter_mut()
                .zip(&mean)
                .for_each(|(p, m)| *p = mu * *p + (1.0 - mu) * m);
            let s: f64 = self.prior.iter().sum();
            self.prior.iter_mut().for_each(|p| *p /= s);
        }
        q
    }

    pub fn reset(&mut self) {
        let k = self.prior.len();
        self.prior = vec![1.0 / k as f64; k];
    }
}

fn assign_flat(params: &mut ParamSet, ids: &[ParamId], flat: &[f64]) {
    let mut at = 0;
    for &id in ids {
        let t = params.value_mut(id).data_mut();
        t.copy_from_slice(&flat[at..at + t.len()]);
        at += t.len();
    }
}

/// Scalar Kalman filter run independently on every coordinate of a
/// parameter vector, with a random-walk state model.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    estimate: Vec<f64>,
    variance: Vec<f64>,
    q: f64,
    r: f64,
}

impl KalmanState {
    pub fn new(initial: Vec<f64>, q: f64, r: f64, p0: f64) -> Result<Self> {
        check_nonnegative("cmf.q", q)?;
        check_nonnegative("cmf.p0", p0)?;
        if !(r > 0.0) {
            return Err(Error::Config(format!("cmf.r = {r} must be > 0")));
        }
        Ok(Self {
            variance: vec![p0; initial.len()],
            estimate: initial,
            q,
            r,
        })
    }

    /// Variance at which the gain no longer changes: the positive root of
    /// `P² + QP − QR = 0`.
    pub fn steady_variance(q: f64, r: f64) -> f64 {
        (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0
    }

    pub fn steady_gain(q: f64, r: f64) -> f64 {
        let p = Self::steady_variance(q, r) + q;
        p / (p + r)
    }

    pub fn estimate(&self) -> &[f64] {
        &self.estimate
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Folds in one observation; returns the gain of coordinate 0.
    pub fn update(&mut self, observation: &[f64]) -> Result<f64> {
        if observation.len() != self.estimate.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "kalman_update",
                lhs: vec![self.estimate.len()],
                rhs: vec![observation.len()],
            }
            .into());
        }
        let mut first = 0.0;
        for (i, ((x, p), &z)) in self
            .estimate
            .iter_mut()
            .zip(self.variance.iter_mut())
            .zip(observation)
            .enumerate()
        {
            *p += self.q;
            let gain = *p / (*p + self.r);
            *x += gain * (z - *x);
            *p *= 1.0 - gain;
            if i == 0 {
                first = gain;
            }
        }
        Ok(first)
    }
}

/// Loss `(1/B) Σ w_i e_i`. Raw weights shrink the whole step when a batch
/// agrees with itself, which rescaled weights would undo.
fn roid_gradient_step(core: &mut GradCore, batch: &Batch, normalize: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = score(core, &mut g, &batch.ids)?;
    let w = if normalize {
        certainty_diversity_weights(&s.probs)
    } else {
        certainty_diversity_raw(&s.probs)
    };
    if w.iter().any(|&x| x > 0.0) {
        let b = batch.len() as f64;
        let scaled: Vec<f64> = w.iter().map(|x| x / b).collect();
        let grads = weighted_gradient(&mut g, s.entropy, &scaled)?;
        core.step(&grads)?;
    }
    Ok(s.probs)
}

pub struct Roid {
    core: GradCore,
    cfg: RoidConfig,
    prior: Option<PriorState>,
}

impl Roid {
    pub fn new(model: Model, cfg: &RoidConfig, correlated: bool) -> Result<Self> {
        check_unit_interval("roid.lambda_src", cfg.lambda_src)?;
        let k = model.head.num_classes();
        let prior = if cfg.prior_correction.enabled(correlated) {
            Some(PriorState::new(cfg.prior_form, k, cfg.prior_momentum)?)
        } else {
            None
        };
        Ok(Self {
            core: GradCore::new(model, &cfg.optim(), "roid")?,
            cfg: cfg.clone(),
            prior,
        })
    }

    pub fn prior_correction_enabled(&self) -> bool {
        self.prior.is_some()
    }
}

impl Adapter for Roid {
    fn name(&self) -> &'static str {
        "roid"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let probs = roid_gradient_step(&mut self.core, batch, self.cfg.normalize_weights)?;
        let source = self
            .core
            .model
            .source_state()
            .expect("trainable encoders have a source snapshot")
            .params
            .clone();
        let params = self.core.model.encoder.params_mut().expect("trainable");
        weight_ensemble(&source, params, &self.core.ids, self.cfg.lambda_src)?;
        let probs = match &mut self.prior {
            Some(p) => p.correct(&probs),
            None => probs,
        };
        Ok(Prediction::from_probs(probs))
    }

    fn reset(&mut self) -> Result<()> {
        if let Some(p) = &mut self.prior {
            p.reset();
        }
        self.core.reset()
    }

    fn model(&self) -> &Model {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.core.model
    }
}

pub struct Cmf {
    core: GradCore,
    cfg: CmfConfig,
    filter: KalmanState,
    prior: Option<PriorState>,
}

impl Cmf {
    pub fn new(model: Model, cfg: &CmfConfig, correlated: bool) -> Result<Self> {
        let core = GradCore::new(model, &cfg.optim(), "cmf")?;
        let theta = core.model.encoder.params().expect("trainable").flatten(&core.ids);
        let filter = KalmanState::new(theta, cfg.q, cfg.r, cfg.p0.unwrap_or(cfg.r))?;
        let prior = if cfg.prior_correction.enabled(correlated) {
            Some(PriorState::new(
                cfg.prior_form,
                core.model.head.num_classes(),
                cfg.prior_momentum,
            )?)
        } else {
            None
        };
        Ok(Self {
            core,
            cfg: cfg.clone(),
            filter,
            prior,
        })
    }

    pub fn filter(&self) -> &KalmanState {
        &self.filter
    }
}

impl Adapter for Cmf {
    fn name(&self) -> &'static str {
        "cmf"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let probs = roid_gradient_step(&mut self.core, batch, self.cfg.normalize_weights)?;
        let params = self.core.model.encoder.params_mut().expect("trainable");
        let observed = params.flatten(&self.core.ids);
        self.filter.update(&observed)?;
        // the next inner step starts from the filtered parameters
        assign_flat(params, &self.core.ids, self.filter.estimate());
        let probs = match &mut self.prior {
            Some(p) => p.correct(&probs),
            None => probs,
        };
        Ok(Prediction::from_probs(probs))
    }

    fn reset(&mut self) -> Result<()> {
        self.core.reset()?;
        let theta = self
            .core
            .model
            .encoder
            .params()
            .expect("trainable")
            .flatten(&self.core.ids);
        self.filter = KalmanState::new(theta, self.cfg.q, self.cfg.r, self.cfg.p0.unwrap_or(self.cfg.r))?;
        if let Some(p) = &mut self.prior {
            p.reset();
        }
        Ok(())
    }

    fn model(&self) -> &Model {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.core.model
    }
}
