//! Per-sample methods over augmented views: prompt-context tuning (TPT)
//! and confident-view embedding averaging (VTE).

use super::{selection_weights, view_seed, Adapter, Model, Prediction, TptConfig, VteConfig};
use crate::classifier::{confidence_filter, probabilities_with, FilterRule};
use crate::encoders::Views;
use crate::error::{Error, Result};
use crate::numerics::{entropy, BnMode, Graph, Sgd, Tensor};
use crate::streams::Batch;

fn view_rule(rho: f64, minimum_kept: usize, n_views: usize, method: &str) -> Result<FilterRule> {
    let rule = FilterRule::top_fraction(rho);
    let rule = FilterRule {
        minimum_kept,
        ..rule
    };
    rule.validate()?;
    if n_views == 0 || n_views < minimum_kept {
        return Err(Error::Config(format!(
            "{method}: {n_views} views cannot satisfy minimum_kept = {minimum_kept}"
        )));
    }
    Ok(rule)
}

fn check_views(model: &Model, n_views: usize, method: &str) -> Result<()> {
    if let Some(max) = model.encoder.capabilities().max_views {
        if n_views > max {
            return Err(Error::Config(format!(
                "{method}: {n_views} views requested, the embedding table stores {max}"
            )));
        }
    }
    Ok(())
}

/// Selected view indices and the mean of their embeddings for one sample.
/// `views` holds the sample's view embeddings as rows.
pub fn vte_select(views: &Tensor, entropies: &[f64], rule: &FilterRule) -> (Vec<usize>, Vec<f64>) {
    let selected = confidence_filter(entropies, rule);
    let mut mean = vec![0.0; views.cols()];
    for &v in &selected {
        mean.iter_mut().zip(views.row(v)).for_each(|(m, x)| *m += x);
    }
    let n = selected.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    (selected, mean)
}

/// Averages the embeddings of the most confident views of each sample and
/// classifies the average. No parameters change.
pub struct Vte {
    model: Model,
    rule: FilterRule,
    n_views: usize,
    seed: u64,
}

impl Vte {
    pub fn new(model: Model, cfg: &VteConfig, seed: u64) -> Result<Self> {
        let rule = view_rule(cfg.rho, cfg.minimum_kept, cfg.n_views, "vte")?;
        check_views(&model, cfg.n_views, "vte")?;
        Ok(Self {
            model,
            rule,
            n_views: cfg.n_views,
            seed,
        })
    }
}

impl Adapter for Vte {
    fn name(&self) -> &'static str {
        "vte"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let n = self.n_views;
        let views = Views::Augmented {
            n_views: n,
            seed: view_seed(self.seed),
        };
        let z = self.model.encoder.embed(&batch.ids, &views, BnMode::Eval)?;
        let ent = entropy(&self.model.head.probabilities_of(&z)?)?;
        let d = z.cols();
        let mut means = Vec::with_capacity(batch.len() * d);
        for i in 0..batch.len() {
            let block = Tensor::matrix(n, d, z.data()[i * n * d..(i + 1) * n * d].to_vec())?;
            let (_, mean) = vte_select(&block, &ent[i * n..(i + 1) * n], &self.rule);
            means.extend(mean);
        }
        let zbar = Tensor::matrix(batch.len(), d, means)?;
        Ok(Prediction::from_probs(self.model.head.probabilities_of(&zbar)?))
    }

    fn reset(&mut self) -> Result<()> {
        Ok(())
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }
}

/// Episodic tuning of a context vector `c` shared by all classes, with
/// prototypes `normalize(t̄_k + c)`. `c` starts at zero for every sample.
pub struct Tpt {
    model: Model,
    cfg: TptConfig,
    rule: FilterRule,
    seed: u64,
}

impl Tpt {
    pub fn new(model: Model, cfg: &TptConfig, seed: u64) -> Result<Self> {
        let rule = view_rule(cfg.rho, cfg.minimum_kept, cfg.n_views, "tpt")?;
        check_views(&model, cfg.n_views, "tpt")?;
        if cfg.lr.is_nan() || cfg.lr < 0.0 {
            return Err(Error::Config(format!("tpt.lr = {} must be ≥ 0", cfg.lr)));
        }
        Ok(Self {
            model,
            cfg: cfg.clone(),
            rule,
            seed,
        })
    }

    /// Class probabilities of `z` under prototypes shifted by `context`.
    fn probabilities(&self, g: &mut Graph, z: &Tensor, context: &Tensor) -> Result<(crate::numerics::Var, crate::numerics::Var)> {
        let protos = g.constant(self.model.head.prototypes().matrix().clone());
        let c = g.param(0, context.clone());
        let shifted = g.add_row(protos, c)?;
        let unit = g.l2_normalize(shifted)?;
        let pt = g.transpose(unit)?;
        let zv = g.constant(z.clone());
        let p = probabilities_with(g, zv, pt, self.model.head.inv_temperature())?;
        Ok((p, c))
    }

    /// Tunes the context on one sample's views and returns it.
    pub fn tune(&self, views: &Tensor) -> Result<Tensor> {
        let mut context = Tensor::zeros(&[self.model.head.dim()]);
        let mut params = crate::numerics::ParamSet::new();
        let id = params.add("context", crate::numerics::ParamRole::Weight, context.clone());
        let mut opt = Sgd::new(self.cfg.lr, 0.0)?;
        for _ in 0..self.cfg.steps {
            let mut g = Graph::new();
            let (p, _) = self.probabilities(&mut g, views, &context)?;
            let e = g.entropy_rows(p)?;
            let sel = confidence_filter(g.value(e).data(), &self.rule);
            let loss = g.weighted_sum(e, &selection_weights(views.rows(), &sel))?;
            let grads = g.backward(loss)?;
            opt.step(&mut params, &grads, &[id])?;
            context = params.value(id).clone();
        }
        Ok(context)
    }

    /// Filtered mean entropy of the views under `context`.
    pub fn filtered_entropy(&self, views: &Tensor, context: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (p, _) = self.probabilities(&mut g, views, context)?;
        let e = g.entropy_rows(p)?;
        let ent = g.value(e).data();
        let sel = confidence_filter(ent, &self.rule);
        Ok(sel.iter().map(|&i| ent[i]).sum::<f64>() / sel.len() as f64)
    }

    pub fn views_of(&mut self, ids: &[usize]) -> Result<Tensor> {
        let views = Views::Augmented {
            n_views: self.cfg.n_views,
            seed: view_seed(self.seed),
        };
        self.model.encoder.embed(ids, &views, BnMode::Eval)
    }
}

impl Adapter for Tpt {
    fn name(&self) -> &'static str {
        "tpt"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let n = self.cfg.n_views;
        let z = self.views_of(&batch.ids)?;
        let d = z.cols();
        let k = self.model.head.num_classes();
        let mut probs = Vec::with_capacity(batch.len() * k);
        for i in 0..batch.len() {
            let block = Tensor::matrix(n, d, z.data()[i * n * d..(i + 1) * n * d].to_vec())?;
            let context = self.tune(&block)?;
            let canonical = Tensor::matrix(1, d, block.row(0).to_vec())?;
            let p = if context.data().iter().all(|&c| c == 0.0) {
                // untouched context leaves the prototypes exactly as they are
                self.model.head.probabilities_of(&canonical)?
            } else {
                let mut g = Graph::new();
                let (p, _) = self.probabilities(&mut g, &canonical, &context)?;
                g.value(p).clone()
            };
            probs.extend_from_slice(p.data());
        }
        Ok(Prediction::from_probs(Tensor::matrix(batch.len(), k, probs)?))
    }

    fn reset(&mut self) -> Result<()> {
        Ok(())
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }
}
