//! Machine-readable run outputs. Nothing time-dependent is written, so a
//! configuration and seed always reproduce the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ResultRecord};
use crate::encoders::TTAE_VERSION;
use crate::error::{Error, Result};
use crate::prototypes::TTAP_VERSION;

pub const BATCH_CSV_HEADER: &str = "batch,domain,errors,size";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub ttae: u32,
    pub ttap: u32,
    pub engine: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub stream_fingerprint: String,
    pub seed: u64,
    pub formats: FormatVersions,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            stream_fingerprint: cfg.stream_fingerprint(),
            seed: cfg.seed,
            formats: FormatVersions {
                ttae: TTAE_VERSION,
                ttap: TTAP_VERSION,
                engine: env!("CARGO_PKG_VERSION").to_string(),
            },
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn batches_csv(record: &ResultRecord) -> String {
    let mut s = String::with_capacity(16 * (record.batches.len() + 1));
    s.push_str(BATCH_CSV_HEADER);
    s.push('\n');
    for b in &record.batches {
        writeln!(s, "{},{},{},{}", b.batch, b.domain, b.errors, b.size).expect("string write");
    }
    s
}

pub fn write_batches_csv(record: &ResultRecord, path: &Path) -> Result<()> {
    write(path, batches_csv(record).as_bytes())
}

pub fn write_summary(record: &ResultRecord, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(record).expect("record serializes");
    json.push(b'\n');
    write(path, &json)
}

pub fn read_summary(path: &Path) -> Result<ResultRecord> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::Config(format!("{}: not a run summary: {e}", path.display())))
}

pub fn write_manifest(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(&Manifest::new(cfg)).expect("manifest serializes");
    json.push(b'\n');
    write(path, &json)
}

/// `batches.csv`, `summary.json` and `manifest.json` under `dir`.
pub fn write_run(cfg: &ExperimentConfig, record: &ResultRecord, dir: &Path) -> Result<()> {
    write_batches_csv(record, &dir.join("batches.csv"))?;
    write_summary(record, &dir.join("summary.json"))?;
    write_manifest(cfg, &dir.join("manifest.json"))
}
