//! Parameter storage and the small layer set used by the toy encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamId, Var};
use super::{NumericsError, Tensor};

/// Default variance floor added inside every normalization layer.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamRole {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamRole::NormScale | ParamRole::NormShift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Which parameters are recorded as trainable leaves during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Scope {
    All,
    Frozen,
    Only(Vec<ParamId>),
}

impl Scope {
    pub fn contains(&self, id: ParamId) -> bool {
        match self {
            Scope::All => true,
            Scope::Frozen => false,
            Scope::Only(ids) => ids.contains(&id),
        }
    }
}

/// Ordered parameter storage; a parameter's index is its [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).collect()
    }

    /// Ids of normalization affine parameters (scale and shift).
    pub fn norm_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.role.is_norm())
            .map(|(i, _)| i)
            .collect()
    }

    /// Records parameter `id` on the graph, as a trainable leaf when `scope`
    /// contains it and as a constant otherwise.
    pub fn bind(&self, g: &mut Graph, id: ParamId, scope: &Scope) -> Var {
        let v = self.params[id].value.clone();
        if scope.contains(id) {
            g.param(id, v)
        } else {
            g.constant(v)
        }
    }

    /// Concatenated values of the selected parameters.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.params[id].value.data().iter().copied())
            .collect()
    }

    /// Euclidean distance to another set over the selected parameters.
    pub fn distance(&self, other: &ParamSet, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|&id| {
                let d = self.params[id].value.distance(&other.params[id].value);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Checks that `other` has the same layout (names and shapes).
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), NumericsError> {
        if self.params.len() != other.params.len() {
            return Err(NumericsError::ParamMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NumericsError::ParamMismatch(format!(
                    "{}{:?} vs {}{:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Fully connected layer `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Kaiming-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            ParamRole::Weight,
            uniform_tensor(rng, &[in_dim, out_dim], bound),
        );
        let bias = params.add(
            format!("{name}.bias"),
            ParamRole::Bias,
            Tensor::zeros(&[out_dim]),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        scope: &Scope,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let w = params.bind(g, self.weight, scope);
        let b = params.bind(g, self.bias, scope);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            ParamRole::NormScale,
            Tensor::full(&[dim], 1.0),
        );
        let beta = params.add(
            format!("{name}.beta"),
            ParamRole::NormShift,
            Tensor::zeros(&[dim]),
        );
        Self {
            gamma,
            beta,
            eps: NORM_EPS,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        scope: &Scope,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let gamma = params.bind(g, self.gamma, scope);
        let beta = params.bind(g, self.beta, scope);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// How a batch-norm layer obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics updated with momentum.
    Train,
    /// Batch statistics; running statistics untouched.
    BatchStats,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            ParamRole::NormScale,
            Tensor::full(&[dim], 1.0),
        );
        let beta = params.add(
            format!("{name}.beta"),
            ParamRole::NormShift,
            Tensor::zeros(&[dim]),
        );
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &ParamSet,
        scope: &Scope,
        x: Var,
        mode: BnMode,
    ) -> Result<Var, NumericsError> {
        let gamma = params.bind(g, self.gamma, scope);
        let beta = params.bind(g, self.beta, scope);
        match mode {
            BnMode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
            BnMode::BatchStats => Ok(g.batch_norm_train(x, gamma, beta, self.eps)?.0),
            BnMode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * s;
                }
                for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * s;
                }
                Ok(y)
            }
        }
    }

    /// Replaces the running statistics with those of one batch.
    pub fn set_statistics(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        self.running_mean = mean;
        self.running_var = var;
    }
}
