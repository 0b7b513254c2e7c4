use super::entropy::{score, weighted_gradient};
use super::{Adapter, AdapterContext, Deyo, GradCore, Method, MethodSettings, Model, Prediction, Tent};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor};
use crate::streams::Batch;

enum Inner {
    Tent(Tent),
    Deyo(Deyo),
}

impl Inner {
    fn core(&mut self) -> &mut GradCore {
        match self {
            Inner::Tent(t) => &mut t.core,
            Inner::Deyo(d) => &mut d.core,
        }
    }
}

/// Processes the stream one sample at a time and applies the inner
/// method's update every `b` samples with the averaged gradient.
///
/// Only methods whose batch loss is a mean of per-sample terms qualify;
/// with a per-sample encoder the result then matches the batch update.
pub struct Accumulate {
    inner: Inner,
    b: usize,
    sum: Option<Gradients>,
    contributing: usize,
    seen: usize,
}

impl Accumulate {
    pub fn build(
        method: Method,
        settings: &MethodSettings,
        model: Model,
        ctx: &AdapterContext,
        b: usize,
    ) -> Result<Self> {
        if b == 0 {
            return Err(Error::Config("accumulation window must be at least 1".into()));
        }
        if model.encoder.capabilities().batch_norm {
            return Err(Error::Unsupported(
                "gradient accumulation needs a batch-norm-free encoder".into(),
            ));
        }
        let inner = match method {
            Method::Tent => Inner::Tent(Tent::new(model, &settings.tent)?),
            Method::Deyo => Inner::Deyo(Deyo::new(model, &settings.deyo, ctx.seed)?),
            Method::Bn1 => {
                return Err(Error::Unsupported(
                    "bn1 has no gradient to accumulate".into(),
                ))
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "gradient accumulation supports tent and deyo, not {other}"
                )))
            }
        };
        Ok(Self {
            inner,
            b,
            sum: None,
            contributing: 0,
            seen: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.b
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(mut g) = self.sum.take() {
            g.scale(1.0 / self.contributing as f64);
            self.inner.core().step(&g)?;
        }
        self.contributing = 0;
        self.seen = 0;
        Ok(())
    }
}

impl Adapter for Accumulate {
    fn name(&self) -> &'static str {
        match self.inner {
            Inner::Tent(_) => "tent",
            Inner::Deyo(_) => "deyo",
        }
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        let mut rows = Vec::new();
        for &id in &batch.ids {
            let mut g = Graph::new();
            let s = score(self.inner.core(), &mut g, &[id])?;
            let contributes = match &mut self.inner {
                Inner::Tent(t) => !t.selected(&s.values).is_empty(),
                Inner::Deyo(d) => !d.kept(&[id], &s)?.is_empty(),
            };
            if contributes {
                let grads = weighted_gradient(&mut g, s.entropy, &[1.0])?;
                match &mut self.sum {
                    Some(acc) => acc.accumulate(&grads)?,
                    None => self.sum = Some(grads),
                }
                self.contributing += 1;
            }
            rows.extend_from_slice(s.probs.data());
            self.seen += 1;
            if self.seen == self.b {
                self.flush()?;
            }
        }
        let k = rows.len() / batch.len().max(1);
        Ok(Prediction::from_probs(Tensor::matrix(batch.len(), k, rows)?))
    }

    fn reset(&mut self) -> Result<()> {
        self.sum = None;
        self.contributing = 0;
        self.seen = 0;
        self.inner.core().reset()
    }

    fn model(&self) -> &Model {
        match &self.inner {
            Inner::Tent(t) => t.model(),
            Inner::Deyo(d) => d.model(),
        }
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.inner.core().model
    }
}
