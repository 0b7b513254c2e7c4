//! Trainable MLP encoder standing in for a vision backbone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::BnMode;
use crate::numerics::functional::l2_normalize_rows;
use crate::numerics::{
    argmax, one_hot, BatchNorm, Gradients, Graph, LayerNorm, Linear, ParamId, ParamRole, ParamSet,
    Scope, Sgd, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    LayerNorm,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub norm: NormKind,
}

#[derive(Debug, Clone, PartialEq)]
enum NormLayer {
    None,
    Layer(LayerNorm),
    Batch(BatchNorm),
}

/// Mutable state needed to reproduce the encoder exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub params: ParamSet,
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// `d_in → hidden… → out_dim` MLP; every hidden layer is
/// linear → normalization → ReLU.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: ToyEncoderConfig,
    params: ParamSet,
    hidden: Vec<(Linear, NormLayer)>,
    head: Linear,
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut hidden = Vec::new();
        let mut width = config.d_in;
        for (i, &h) in config.hidden.iter().enumerate() {
            let lin = Linear::new(&mut params, &format!("fc{i}"), width, h, &mut rng);
            let norm = match config.norm {
                NormKind::None => NormLayer::None,
                NormKind::LayerNorm => {
                    NormLayer::Layer(LayerNorm::new(&mut params, &format!("ln{i}"), h))
                }
                NormKind::BatchNorm => {
                    NormLayer::Batch(BatchNorm::new(&mut params, &format!("bn{i}"), h))
                }
            };
            hidden.push((lin, norm));
            width = h;
        }
        let head = Linear::new(&mut params, "out", width, config.out_dim, &mut rng);
        Self {
            config,
            params,
            hidden,
            head,
        }
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.config.norm == NormKind::BatchNorm && !self.hidden.is_empty()
    }

    pub fn norm_ids(&self) -> Vec<ParamId> {
        self.params.norm_ids()
    }

    /// Records the forward pass of `x` (`B × d_in`) on `g`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: BnMode, scope: &Scope) -> Result<Var> {
        let d = g.value(x).cols();
        if d != self.config.d_in {
            return Err(Error::Config(format!(
                "encoder expects {} input features, got {d}",
                self.config.d_in
            )));
        }
        let mut h = x;
        for (lin, norm) in &mut self.hidden {
            h = lin.forward(g, &self.params, scope, h)?;
            h = match norm {
                NormLayer::None => h,
                NormLayer::Layer(ln) => ln.forward(g, &self.params, scope, h)?,
                NormLayer::Batch(bn) => bn.forward(g, &self.params, scope, h, mode)?,
            };
            h = g.relu(h)?;
        }
        Ok(self.head.forward(g, &self.params, scope, h)?)
    }

    /// Gradient-free forward of a batch. `Train` mode updates running
    /// statistics; the other modes leave the encoder untouched.
    pub fn embed(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, xv, mode, &Scope::Frozen)?;
        Ok(g.value(z).clone())
    }

    /// Overwrites every batch-norm layer's running statistics with those of
    /// `x`, leaving affine parameters untouched.
    pub fn bn_recalculate(&mut self, x: &Tensor) -> Result<()> {
        if !self.uses_batch_norm() {
            return Err(Error::Unsupported(
                "statistics recalculation needs a batch-norm encoder".into(),
            ));
        }
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        for (lin, norm) in &mut self.hidden {
            h = lin.forward(&mut g, &self.params, &Scope::Frozen, h)?;
            if let NormLayer::Batch(bn) = norm {
                let gamma = g.constant(self.params.value(bn.gamma).clone());
                let beta = g.constant(self.params.value(bn.beta).clone());
                let (y, stats) = g.batch_norm_train(h, gamma, beta, bn.eps)?;
                bn.set_statistics(stats.mean, stats.var);
                h = y;
            }
            h = g.relu(h)?;
        }
        Ok(())
    }

    pub fn state(&self) -> EncoderState {
        EncoderState {
            params: self.params.clone(),
            bn_stats: self
                .hidden
                .iter()
                .filter_map(|(_, n)| match n {
                    NormLayer::Batch(bn) => Some((bn.running_mean.clone(), bn.running_var.clone())),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn restore(&mut self, state: &EncoderState) -> Result<()> {
        self.params.check_compatible(&state.params)?;
        self.params = state.params.clone();
        let mut stats = state.bn_stats.iter();
        for (_, n) in &mut self.hidden {
            if let NormLayer::Batch(bn) = n {
                let (m, v) = stats
                    .next()
                    .ok_or_else(|| Error::Config("snapshot lacks batch-norm statistics".into()))?;
                bn.set_statistics(m.clone(), v.clone());
            }
        }
        Ok(())
    }

    /// Running statistics of each batch-norm layer.
    pub fn bn_statistics(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.state().bn_stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Logit scale of the cosine classifier used during training.
    pub logit_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            logit_scale: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_error: f64,
}

/// Supervised source training with a cosine classifier whose class vectors
/// are learned jointly and discarded afterwards.
pub fn train_source(
    encoder: &mut ToyEncoder,
    inputs: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = encoder.config.out_dim;
    // the class vectors get their own one-entry set and optimizer; inside the
    // graph they take the id just past the encoder's parameters
    let class_id = encoder.params.len();
    let mut head = ParamSet::new();
    let head_id = head.add(
        "class_vectors",
        ParamRole::Weight,
        Tensor::matrix(
            classes,
            d,
            (0..classes * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?,
    );
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut head_opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let ids = encoder.params.all_ids();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && encoder.uses_batch_norm() {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(inputs.select_rows(chunk));
            let z = encoder.forward(&mut g, x, BnMode::Train, &Scope::All)?;
            let w = g.param(class_id, head.value(head_id).clone());
            let zn = g.l2_normalize(z)?;
            let wn = g.l2_normalize(w)?;
            let wt = g.transpose(wn)?;
            let sims = g.matmul(zn, wt)?;
            let logits = g.scale(sims, cfg.logit_scale)?;
            let p = g.softmax(logits)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(p, &one_hot(&batch_labels, classes))?;
            total += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            opt.step(&mut encoder.params, &grads, &ids)?;
            let mut hg = Gradients::default();
            hg.insert(head_id, grads.get(class_id).expect("class vectors recorded").clone());
            head_opt.step(&mut head, &hg, &[head_id])?;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let class_vectors = head.value(head_id);

    let embedded = encoder.embed(inputs, BnMode::Eval)?;
    let wn = l2_normalize_rows(class_vectors)?;
    let zn = l2_normalize_rows(&embedded)?;
    let mut wrong = 0;
    for (i, row) in zn.iter_rows().enumerate() {
        let scores: Vec<f64> = wn
            .iter_rows()
            .map(|w| w.iter().zip(row).map(|(a, b)| a * b).sum())
            .collect();
        if argmax(&scores) != labels[i] {
            wrong += 1;
        }
    }
    Ok(TrainReport {
        epoch_losses,
        train_error: wrong as f64 / labels.len().max(1) as f64,
    })
}
