use super::{Adapter, Model, Prediction};
use crate::error::{Error, Result};
use crate::streams::Batch;

/// The frozen zero-shot model.
pub struct Source {
    model: Model,
}

impl Source {
    pub fn new(model: Model) -> Self {
        Self { model }
    }
}

impl Adapter for Source {
    fn name(&self) -> &'static str {
        "source"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        Ok(Prediction::from_probs(self.model.source_probs(&batch.ids)?))
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

/// Replaces batch-norm statistics with those of each test batch before
/// predicting it.
pub struct Bn1 {
    model: Model,
}

impl Bn1 {
    pub fn new(model: Model) -> Result<Self> {
        if !model.encoder.capabilities().batch_norm {
            return Err(Error::Unsupported(
                "bn1 recalculates batch-norm statistics; the encoder has no batch norm".into(),
            ));
        }
        Ok(Self { model })
    }
}

impl Adapter for Bn1 {
    fn name(&self) -> &'static str {
        "bn1"
    }

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction> {
        self.model.encoder.recalibrate_bn(&batch.ids)?;
        Ok(Prediction::from_probs(self.model.source_probs(&batch.ids)?))
    }

    fn reset(&mut self) -> Result<()> {
        self.model.restore_source()
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }
}
