//! Test-time adaptation methods behind one online contract.
//!
//! Every [`Adapter`] receives the current batch, reports class
//! probabilities for it and then updates its own state. Gradient methods
//! report the forward pass computed before their update, so a batch never
//! benefits from adapting on itself. The exceptions are the episodic
//! methods (TPT, VTE), which adapt per sample and predict afterwards, and
//! BN-1, whose statistics refresh precedes prediction by definition.

mod accumulate;
mod config;
mod entropy;
mod episodic;
mod roid;
mod source;

use serde::{Deserialize, Serialize};

pub use accumulate::Accumulate;
pub use config::{
    CmfConfig, DeyoConfig, EtaConfig, MethodSettings, OptimConfig, ParamScope, PriorForm, PriorMode, RoidConfig,
    SarConfig, TentConfig, TptConfig, VteConfig, DEFAULTS_TOML,
};
pub use entropy::{deyo_kept, Deyo, Eta, Sar, Tent};
pub use episodic::{vte_select, Tpt, Vte};
pub use roid::{
    certainty_diversity_raw, certainty_diversity_weights, weight_ensemble, Cmf, KalmanState, PriorState, Roid,
    smoothed_batch_prior,
};
pub use source::{Bn1, Source};

use crate::classifier::{predict, ZeroShotHead};
use crate::encoders::{Encoder, EncoderState, Views};
use crate::error::{Error, Result};
use crate::numerics::{BnMode, Graph, ParamId, Scope, Sgd, Tensor, Var};
use crate::streams::Batch;

/// Class probabilities and arg-max labels for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_probs(probs: Tensor) -> Self {
        let labels = predict(&probs);
        Self { probs, labels }
    }
}

pub trait Adapter: Send {
    fn name(&self) -> &'static str;

    fn adapt_and_predict(&mut self, batch: &Batch) -> Result<Prediction>;

    /// Restores the source parameters bit for bit and clears all state.
    fn reset(&mut self) -> Result<()>;

    fn model(&self) -> &Model;

    fn model_mut(&mut self) -> &mut Model;
}

/// Encoder plus zero-shot head, with a snapshot of the source parameters.
pub struct Model {
    pub encoder: Box<dyn Encoder>,
    pub head: ZeroShotHead,
    source: Option<EncoderState>,
}

impl Model {
    pub fn new(encoder: Box<dyn Encoder>, head: ZeroShotHead) -> Result<Self> {
        if encoder.dim() != head.dim() {
            return Err(Error::Config(format!(
                "encoder produces {}-dimensional embeddings, prototypes have {}",
                encoder.dim(),
                head.dim()
            )));
        }
        let source = encoder.state();
        Ok(Self {
            encoder,
            head,
            source,
        })
    }

    pub fn source_state(&self) -> Option<&EncoderState> {
        self.source.as_ref()
    }

    pub fn restore_source(&mut self) -> Result<()> {
        match &self.source {
            Some(s) => self.encoder.restore(s),
            None => Ok(()),
        }
    }

    /// Frozen-model probabilities of the canonical views of `ids`.
    pub fn source_probs(&mut self, ids: &[usize]) -> Result<Tensor> {
        let z = self.encoder.embed(ids, &Views::Canonical, BnMode::Eval)?;
        self.head.probabilities_of(&z)
    }

    /// Canonical-view embeddings under the current parameters.
    pub fn embeddings(&mut self, ids: &[usize]) -> Result<Tensor> {
        self.encoder.embed(ids, &Views::Canonical, BnMode::Eval)
    }
}

/// Optimizer, parameter scope and forward plumbing shared by every method
/// that updates encoder parameters.
pub(crate) struct GradCore {
    pub model: Model,
    pub opt: Sgd,
    pub ids: Vec<ParamId>,
    pub mode: BnMode,
}

impl GradCore {
    pub fn new(model: Model, cfg: &OptimConfig, method: &str) -> Result<Self> {
        let caps = model.encoder.capabilities();
        if !caps.trainable {
            return Err(Error::Unsupported(format!(
                "{method} updates encoder parameters; the encoder is frozen"
            )));
        }
        let ids = match cfg.scope {
            ParamScope::Norm => model.encoder.norm_ids(),
            ParamScope::All => model
                .encoder
                .params()
                .map(|p| p.all_ids())
                .unwrap_or_default(),
        };
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "{method}: the encoder has no normalization parameters; \
                 set scope = \"all\" to adapt every parameter"
            )));
        }
        // batch-norm layers normalize with the test batch, as in TENT
        let mode = if caps.batch_norm {
            BnMode::BatchStats
        } else {
            BnMode::Eval
        };
        Ok(Self {
            model,
            opt: cfg.optimizer()?,
            ids,
            mode,
        })
    }

    pub fn scope(&self) -> Scope {
        Scope::Only(self.ids.clone())
    }

    /// Records class probabilities of `ids` under `views`.
    pub fn forward(&mut self, g: &mut Graph, ids: &[usize], views: &Views) -> Result<Var> {
        let scope = self.scope();
        let z = self
            .model
            .encoder
            .forward(g, ids, views, self.mode, &scope)?;
        self.model.head.probabilities_var(g, z)
    }

    pub fn step(&mut self, grads: &crate::numerics::Gradients) -> Result<()> {
        let params = self
            .model
            .encoder
            .params_mut()
            .expect("trainable encoders expose parameters");
        self.opt.step(params, grads, &self.ids)?;
        Ok(())
    }

    pub fn reset(&mut self) -> Result<()> {
        self.opt.reset();
        self.model.restore_source()
    }
}

/// Method names accepted by [`build_adapter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    #[serde(alias = "bn-1")]
    Bn1,
    Tent,
    Eta,
    Sar,
    Deyo,
    Roid,
    Cmf,
    Tpt,
    Vte,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Source,
        Method::Bn1,
        Method::Tent,
        Method::Eta,
        Method::Sar,
        Method::Deyo,
        Method::Roid,
        Method::Cmf,
        Method::Tpt,
        Method::Vte,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Bn1 => "bn1",
            Method::Tent => "tent",
            Method::Eta => "eta",
            Method::Sar => "sar",
            Method::Deyo => "deyo",
            Method::Roid => "roid",
            Method::Cmf => "cmf",
            Method::Tpt => "tpt",
            Method::Vte => "vte",
        }
    }

    pub fn is_gradient_based(self) -> bool {
        matches!(
            self,
            Method::Tent
                | Method::Eta
                | Method::Sar
                | Method::Deyo
                | Method::Roid
                | Method::Cmf
                | Method::Tpt
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let s = if s == "bn-1" { "bn1".to_string() } else { s };
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Run-level facts an adapter may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdapterContext {
    pub seed: u64,
    /// The stream is label-sorted; enables ROID's prior correction when set
    /// to follow the stream.
    pub correlated: bool,
    /// Gradient accumulation over this many samples.
    pub accumulate: Option<usize>,
}

pub fn build_adapter(
    method: Method,
    settings: &MethodSettings,
    model: Model,
    ctx: &AdapterContext,
) -> Result<Box<dyn Adapter>> {
    if let Some(b) = ctx.accumulate {
        return Ok(Box::new(Accumulate::build(method, settings, model, ctx, b)?));
    }
    Ok(match method {
        Method::Source => Box::new(Source::new(model)),
        Method::Bn1 => Box::new(Bn1::new(model)?),
        Method::Tent => Box::new(Tent::new(model, &settings.tent)?),
        Method::Eta => Box::new(Eta::new(model, &settings.eta)?),
        Method::Sar => Box::new(Sar::new(model, &settings.sar)?),
        Method::Deyo => Box::new(Deyo::new(model, &settings.deyo, ctx.seed)?),
        Method::Roid => Box::new(Roid::new(model, &settings.roid, ctx.correlated)?),
        Method::Cmf => Box::new(Cmf::new(model, &settings.cmf, ctx.correlated)?),
        Method::Tpt => Box::new(Tpt::new(model, &settings.tpt, ctx.seed)?),
        Method::Vte => Box::new(Vte::new(model, &settings.vte, ctx.seed)?),
    })
}

/// Seed of the augmented views of a run; shared by TPT and VTE so both
/// see identical views.
pub(crate) fn view_seed(seed: u64) -> u64 {
    crate::encoders::mix_seed(seed, 0x7E57_0001)
}

/// `1/|S|` on the selected rows, 0 elsewhere.
pub(crate) fn selection_weights(n: usize, selected: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    let share = 1.0 / selected.len() as f64;
    for &i in selected {
        w[i] = share;
    }
    w
}
