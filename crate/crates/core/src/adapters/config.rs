use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Sgd;

/// The default experiment configuration, including every method tunable.
pub const DEFAULTS_TOML: &str = include_str!("../../config/defaults.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    /// Normalization affine parameters only.
    Norm,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
}

impl OptimConfig {
    pub fn optimizer(&self) -> Result<Sgd> {
        Ok(Sgd::new(self.lr, self.momentum)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Auto,
    On,
    Off,
}

impl PriorMode {
    pub fn enabled(self, correlated: bool) -> bool {
        match self {
            PriorMode::Auto => correlated,
            PriorMode::On => true,
            PriorMode::Off => false,
        }
    }
}

/// How prior correction reweights output probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorForm {
    /// `q ∝ p / (p̄ + 1/K)` with `p̄` a running average of corrected
    /// batch means; counters classes that dominated recently.
    Running,
    /// `q ∝ p · π̃` with `π̃` the smoothed mean prediction of the current
    /// batch; sharpens towards the classes the batch is dominated by.
    Batch,
}

macro_rules! optim_accessor {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn optim(&self) -> OptimConfig {
                OptimConfig { lr: self.lr, momentum: self.momentum, scope: self.scope }
            }
        }
    )*};
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TentConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
    /// Restrict the loss to samples with entropy below `factor · ln K`.
    #[serde(default)]
    pub filter_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
    pub e0_factor: f64,
    pub diversity_threshold: f64,
    pub diversity_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SarConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
    pub e0_factor: f64,
    pub rho_sam: f64,
    pub reset_threshold: f64,
    pub loss_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeyoConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
    /// Entropy filter `e < factor · ln K`; may be infinite.
    pub entropy_factor: f64,
    pub plpd_threshold: f64,
    pub block_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoidConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
    pub lambda_src: f64,
    /// Rescale loss weights to sum to the batch size.
    pub normalize_weights: bool,
    pub prior_correction: PriorMode,
    pub prior_form: PriorForm,
    pub prior_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmfConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: ParamScope,
    pub q: f64,
    pub r: f64,
    #[serde(default)]
    pub p0: Option<f64>,
    /// Rescale loss weights to sum to the batch size.
    pub normalize_weights: bool,
    pub prior_correction: PriorMode,
    pub prior_form: PriorForm,
    pub prior_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TptConfig {
    pub lr: f64,
    pub steps: usize,
    pub n_views: usize,
    pub rho: f64,
    pub minimum_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VteConfig {
    pub n_views: usize,
    pub rho: f64,
    pub minimum_kept: usize,
}

optim_accessor!(TentConfig, EtaConfig, SarConfig, DeyoConfig, RoidConfig, CmfConfig);

/// Tunables of every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSettings {
    pub tent: TentConfig,
    pub eta: EtaConfig,
    pub sar: SarConfig,
    pub deyo: DeyoConfig,
    pub roid: RoidConfig,
    pub cmf: CmfConfig,
    pub tpt: TptConfig,
    pub vte: VteConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        #[derive(Deserialize)]
        struct Wrapper {
            methods: MethodSettings,
        }
        // unknown top-level tables are ignored here; the harness validates them
        let w: Wrapper = toml::from_str(DEFAULTS_TOML).expect("bundled defaults parse");
        w.methods
    }
}

pub(crate) fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
    }
    Ok(())
}

pub(crate) fn check_nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_nan() || v < 0.0 {
        return Err(Error::Config(format!("{name} = {v} must be ≥ 0")));
    }
    Ok(())
}
