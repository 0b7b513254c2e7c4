use std::collections::BTreeMap;

use super::graph::{Gradients, ParamId};
use super::nn::ParamSet;
use super::NumericsError;

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, NumericsError> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(NumericsError::InvalidHyperparameter(format!("lr = {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NumericsError::InvalidHyperparameter(format!(
                "momentum = {momentum} not in [0, 1)"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Drops all momentum buffers.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates the parameters in `ids` from `grads`. Every id must have a
    /// gradient of matching shape.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &Gradients,
        ids: &[ParamId],
    ) -> Result<(), NumericsError> {
        for &id in ids {
            if id >= params.len() {
                return Err(NumericsError::ParamMismatch(format!("unknown parameter {id}")));
            }
            let g = grads.get(id).ok_or_else(|| {
                NumericsError::ParamMismatch(format!(
                    "no gradient for parameter `{}`",
                    params.get(id).name
                ))
            })?;
            if g.shape() != params.value(id).shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: params.value(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        for &id in ids {
            let g = grads.get(id).expect("checked above").data();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; g.len()]);
            let w = params.value_mut(id).data_mut();
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}
