//! Encoders map sample ids to image embeddings.
//!
//! Two implementations share the [`Encoder`] contract: [`FrozenTable`] over a
//! precomputed multi-view [`EmbeddingDataset`], and [`RawEncoder`], a
//! trainable [`ToyEncoder`] over raw synthetic inputs.

mod augment;
mod toy;
mod ttae;

use std::sync::Arc;

pub use augment::{
    add_relative_noise, augment, mask_coordinates, mix_seed, shape_destroying_transform,
    AugmentConfig,
};
pub use toy::{
    train_source, EncoderState, NormKind, ToyEncoder, ToyEncoderConfig, TrainConfig, TrainReport,
};
pub use ttae::{EmbeddingDataset, TTAE_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{BnMode, Graph, ParamId, ParamSet, Scope, Tensor, Var};

/// Which rows `forward` produces for each requested sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Views {
    /// One row per sample.
    Canonical,
    /// `n_views` rows per sample (sample-major), view 0 canonical.
    Augmented { n_views: usize, seed: u64 },
    /// One block-permuted row per sample.
    ShapeDestroyed { block_size: usize, seed: u64 },
}

impl Views {
    pub fn rows_per_sample(&self) -> usize {
        match *self {
            Views::Augmented { n_views, .. } => n_views,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub trainable: bool,
    pub raw_input: bool,
    pub batch_norm: bool,
    /// Upper bound on augmented views, if any.
    pub max_views: Option<usize>,
}

/// Labels and domain assignment of every sample an encoder can embed.
pub trait Labeled {
    fn labels(&self) -> &[usize];
    fn domain_ids(&self) -> &[usize];
    fn class_names(&self) -> &[String];
    fn domain_names(&self) -> &[String];
}

pub trait Encoder: Send {
    fn dim(&self) -> usize;
    fn capabilities(&self) -> Capabilities;
    fn num_samples(&self) -> usize;

    /// Records the embeddings of `ids` under `views` on `g`. Only
    /// parameters in `scope` receive gradients.
    fn forward(
        &mut self,
        g: &mut Graph,
        ids: &[usize],
        views: &Views,
        mode: BnMode,
        scope: &Scope,
    ) -> Result<Var>;

    fn embed(&mut self, ids: &[usize], views: &Views, mode: BnMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = self.forward(&mut g, ids, views, mode, &Scope::Frozen)?;
        Ok(g.value(z).clone())
    }

    fn params(&self) -> Option<&ParamSet> {
        None
    }

    fn params_mut(&mut self) -> Option<&mut ParamSet> {
        None
    }

    fn norm_ids(&self) -> Vec<ParamId> {
        self.params().map(ParamSet::norm_ids).unwrap_or_default()
    }

    fn state(&self) -> Option<EncoderState> {
        None
    }

    fn restore(&mut self, _state: &EncoderState) -> Result<()> {
        Err(Error::Unsupported("encoder has no mutable state".into()))
    }

    /// Replaces batch-norm running statistics with those of `ids`.
    fn recalibrate_bn(&mut self, _ids: &[usize]) -> Result<()> {
        Err(Error::Unsupported(
            "statistics recalculation needs a batch-norm encoder".into(),
        ))
    }
}

fn check_ids(ids: &[usize], n: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::OutOfRange(format!("sample {i} of {n}"))),
        None => Ok(()),
    }
}

/// Read-only encoder over exported embeddings.
#[derive(Debug, Clone)]
pub struct FrozenTable {
    data: Arc<EmbeddingDataset>,
}

impl FrozenTable {
    pub fn new(data: Arc<EmbeddingDataset>) -> Self {
        Self { data }
    }

    pub fn dataset(&self) -> &EmbeddingDataset {
        &self.data
    }
}

impl Labeled for FrozenTable {
    fn labels(&self) -> &[usize] {
        self.data.labels()
    }
    fn domain_ids(&self) -> &[usize] {
        self.data.domain_ids()
    }
    fn class_names(&self) -> &[String] {
        self.data.class_names()
    }
    fn domain_names(&self) -> &[String] {
        self.data.domain_names()
    }
}

impl Encoder for FrozenTable {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            trainable: false,
            raw_input: false,
            batch_norm: false,
            max_views: Some(self.data.views()),
        }
    }

    fn num_samples(&self) -> usize {
        self.data.samples()
    }

    fn forward(
        &mut self,
        g: &mut Graph,
        ids: &[usize],
        views: &Views,
        _mode: BnMode,
        _scope: &Scope,
    ) -> Result<Var> {
        let t = match *views {
            Views::Canonical => self.data.frozen_embed(ids, &[0])?,
            // stored views are already random; the seed has nothing to pick
            Views::Augmented { n_views, .. } => {
                if n_views == 0 || n_views > self.data.views() {
                    return Err(Error::OutOfRange(format!(
                        "{n_views} views requested, table stores {}",
                        self.data.views()
                    )));
                }
                let v: Vec<usize> = (0..n_views).collect();
                self.data.frozen_embed(ids, &v)?
            }
            Views::ShapeDestroyed { .. } => {
                return Err(Error::Unsupported(
                    "input transforms need raw inputs; embedding tables have none".into(),
                ))
            }
        };
        Ok(g.constant(t))
    }
}

/// Raw inputs with labels, the synthetic counterpart of an image folder.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Samples whose domain is `domain`, in index order.
    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.domain_ids[i] == domain)
            .collect()
    }
}

impl Labeled for RawDataset {
    fn labels(&self) -> &[usize] {
        &self.labels
    }
    fn domain_ids(&self) -> &[usize] {
        &self.domain_ids
    }
    fn class_names(&self) -> &[String] {
        &self.class_names
    }
    fn domain_names(&self) -> &[String] {
        &self.domain_names
    }
}

/// A [`ToyEncoder`] bound to the raw inputs it embeds.
#[derive(Debug, Clone)]
pub struct RawEncoder {
    net: ToyEncoder,
    data: Arc<RawDataset>,
    augment: AugmentConfig,
}

impl RawEncoder {
    pub fn new(net: ToyEncoder, data: Arc<RawDataset>, augment: AugmentConfig) -> Result<Self> {
        if net.config().d_in != data.inputs.cols() {
            return Err(Error::Config(format!(
                "encoder input width {} does not match data width {}",
                net.config().d_in,
                data.inputs.cols()
            )));
        }
        Ok(Self { net, data, augment })
    }

    pub fn net(&self) -> &ToyEncoder {
        &self.net
    }

    pub fn data(&self) -> &RawDataset {
        &self.data
    }

    /// The input rows `forward` would encode.
    pub fn inputs(&self, ids: &[usize], views: &Views) -> Result<Tensor> {
        check_ids(ids, self.data.len())?;
        let x = self.data.inputs.select_rows(ids);
        Ok(match *views {
            Views::Canonical => x,
            Views::Augmented { n_views, seed } => {
                if n_views == 0 {
                    return Err(Error::Config("n_views must be at least 1".into()));
                }
                let d = x.cols();
                let mut data = Vec::with_capacity(ids.len() * n_views * d);
                for (r, &id) in ids.iter().enumerate() {
                    let one = Tensor::matrix(1, d, x.row(r).to_vec())?;
                    data.extend(
                        augment(&one, n_views, &self.augment, mix_seed(seed, id as u64))
                            .into_data(),
                    );
                }
                Tensor::matrix(ids.len() * n_views, d, data)?
            }
            Views::ShapeDestroyed { block_size, seed } => {
                if block_size == 0 {
                    return Err(Error::Config("block_size must be at least 1".into()));
                }
                let d = x.cols();
                let mut data = Vec::with_capacity(x.numel());
                for (r, &id) in ids.iter().enumerate() {
                    let one = Tensor::matrix(1, d, x.row(r).to_vec())?;
                    data.extend(
                        shape_destroying_transform(&one, block_size, mix_seed(seed, id as u64))
                            .into_data(),
                    );
                }
                Tensor::matrix(ids.len(), d, data)?
            }
        })
    }
}

impl Labeled for RawEncoder {
    fn labels(&self) -> &[usize] {
        &self.data.labels
    }
    fn domain_ids(&self) -> &[usize] {
        &self.data.domain_ids
    }
    fn class_names(&self) -> &[String] {
        &self.data.class_names
    }
    fn domain_names(&self) -> &[String] {
        &self.data.domain_names
    }
}

impl Encoder for RawEncoder {
    fn dim(&self) -> usize {
        self.net.config().out_dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            trainable: true,
            raw_input: true,
            batch_norm: self.net.uses_batch_norm(),
            max_views: None,
        }
    }

    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn forward(
        &mut self,
        g: &mut Graph,
        ids: &[usize],
        views: &Views,
        mode: BnMode,
        scope: &Scope,
    ) -> Result<Var> {
        let x = self.inputs(ids, views)?;
        let xv = g.constant(x);
        self.net.forward(g, xv, mode, scope)
    }

    fn params(&self) -> Option<&ParamSet> {
        Some(self.net.params())
    }

    fn params_mut(&mut self) -> Option<&mut ParamSet> {
        Some(self.net.params_mut())
    }

    fn state(&self) -> Option<EncoderState> {
        Some(self.net.state())
    }

    fn restore(&mut self, state: &EncoderState) -> Result<()> {
        self.net.restore(state)
    }

    fn recalibrate_bn(&mut self, ids: &[usize]) -> Result<()> {
        let x = self.inputs(ids, &Views::Canonical)?;
        self.net.bn_recalculate(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> RawEncoder {
        let inputs = Tensor::matrix(
            4,
            4,
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let data = RawDataset {
            inputs,
            labels: vec![0, 1, 0, 1],
            domain_ids: vec![0; 4],
            class_names: vec!["a".into(), "b".into()],
            domain_names: vec!["clean".into()],
        };
        let net = ToyEncoder::new(
            ToyEncoderConfig {
                d_in: 4,
                hidden: vec![8],
                out_dim: 3,
                norm: NormKind::BatchNorm,
            },
            1,
        );
        RawEncoder::new(net, Arc::new(data), AugmentConfig::default()).unwrap()
    }

    #[test]
    fn eval_embedding_is_pure() {
        let mut e = raw();
        let before = e.state();
        let a = e.embed(&[0, 1, 2], &Views::Canonical, BnMode::Eval).unwrap();
        let b = e.embed(&[0, 1, 2], &Views::Canonical, BnMode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, e.state());
    }

    #[test]
    fn train_and_eval_differ_for_batch_norm() {
        let mut e = raw();
        let ev = e.embed(&[0, 1, 2, 3], &Views::Canonical, BnMode::Eval).unwrap();
        let bs = e
            .embed(&[0, 1, 2, 3], &Views::Canonical, BnMode::BatchStats)
            .unwrap();
        assert_ne!(ev, bs);
    }

    #[test]
    fn view_seed_depends_on_sample_only() {
        let mut e = raw();
        let views = Views::Augmented {
            n_views: 3,
            seed: 7,
        };
        let together = e.inputs(&[1, 2], &views).unwrap();
        let alone = e.inputs(&[2], &views).unwrap();
        assert_eq!(&together.data()[12..], alone.data());
    }

    #[test]
    fn bn_recalibration_rejected_without_bn() {
        let mut e = raw();
        e.net = ToyEncoder::new(
            ToyEncoderConfig {
                d_in: 4,
                hidden: vec![8],
                out_dim: 3,
                norm: NormKind::LayerNorm,
            },
            1,
        );
        assert!(e.recalibrate_bn(&[0, 1]).is_err());
    }

    #[test]
    fn constant_batch_stays_finite() {
        let mut e = raw();
        e.recalibrate_bn(&[2]).unwrap();
        let z = e.embed(&[0], &Views::Canonical, BnMode::Eval).unwrap();
        assert!(z.is_finite());
    }
}
