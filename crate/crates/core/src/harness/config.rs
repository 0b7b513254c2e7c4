//! Experiment configuration: bundled defaults, an optional TOML file and
//! `key=value` overrides, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::adapters::{Method, MethodSettings, DEFAULTS_TOML};
use crate::encoders::{AugmentConfig, NormKind, ToyEncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::streams::{Scenario, StreamSpec, SyntheticSpec};

/// Calibrated overrides for the synthetic benchmark; see the file itself.
pub const SYNTHETIC_BENCHMARK_TOML: &str = include_str!("../../config/synthetic_benchmark.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `synthetic` or the path of a TTAE table.
    pub source: String,
    pub synthetic: SyntheticSpec,
}

impl DataConfig {
    pub fn ttae_path(&self) -> Option<&Path> {
        (self.source != "synthetic").then(|| Path::new(&self.source))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub banks: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub norm: NormKind,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl EncoderConfig {
    pub fn toy(&self, d_in: usize) -> ToyEncoderConfig {
        ToyEncoderConfig {
            d_in,
            hidden: self.hidden.clone(),
            out_dim: self.out_dim,
            norm: self.norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub inv_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub scenario: Scenario,
    pub batch_size: usize,
    pub domain_order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodChoice {
    pub name: Method,
    /// 0 disables accumulation.
    pub accumulate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub prompts: PromptConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub stream: StreamConfig,
    pub method: MethodChoice,
    pub output: OutputConfig,
    pub methods: MethodSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_table(default_table()).expect("bundled defaults are valid")
    }
}

fn default_table() -> Table {
    DEFAULTS_TOML.parse().expect("bundled defaults parse")
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}

impl ExperimentConfig {
    fn from_table(t: Table) -> Result<Self> {
        let cfg: Self = Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `text` (TOML), then `overrides`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_layers(&[text], overrides)
    }

    /// Defaults, then each TOML layer in order, then `overrides`.
    pub fn from_layers(layers: &[&str], overrides: &[String]) -> Result<Self> {
        let mut table = default_table();
        for text in layers {
            let layer: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
            merge(&mut table, layer);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Defaults, then the synthetic benchmark profile, then `overrides`.
    pub fn synthetic_benchmark(overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(SYNTHETIC_BENCHMARK_TOML, overrides)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Returns a copy with extra overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: Table = Table::try_from(self)
            .map_err(|e| Error::Config(format!("config does not serialize: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ttae_path().is_none() {
            self.data.synthetic.validate()?;
        } else if self.prompts.banks.is_empty() {
            return Err(Error::Config(
                "an embedding table needs prompt banks (prompts.banks)".into(),
            ));
        }
        if self.encoder.out_dim == 0 {
            return Err(Error::Config("encoder.out_dim must be at least 1".into()));
        }
        if self.stream.batch_size == 0 {
            return Err(Error::Config("stream.batch_size must be at least 1".into()));
        }
        if !(self.classifier.inv_temperature > 0.0) {
            return Err(Error::Config("classifier.inv_temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            scenario: self.stream.scenario,
            domain_order: self.stream.domain_order.clone(),
            batch_size: self.stream.batch_size,
            seed: self.seed,
        }
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Hash of everything that determines the test stream and the source
    /// model; runs comparable in one table share it.
    pub fn stream_fingerprint(&self) -> String {
        let json = serde_json::to_vec(&(
            self.seed,
            &self.data,
            &self.prompts,
            &self.encoder,
            &self.classifier,
            &self.stream,
        ))
        .expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
