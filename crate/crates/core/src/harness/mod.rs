//! Experiment runner: builds data, model and adapter from a configuration,
//! walks the stream once and records online errors.

mod config;
mod output;
mod report;

use std::sync::Arc;
use std::time::Instant;

pub use config::{
    apply_override, ClassifierConfig, DataConfig, EncoderConfig, ExperimentConfig, MethodChoice,
    OutputConfig, PromptConfig, StreamConfig, SYNTHETIC_BENCHMARK_TOML,
};
pub use output::{
    batches_csv, read_summary, write_batches_csv, write_manifest, write_run, write_summary, FormatVersions, Manifest,
    BATCH_CSV_HEADER,
};
pub use report::{compare_records, ComparisonTable, SweepPoint, SweepResult};

use serde::{Deserialize, Serialize};

use crate::adapters::{build_adapter, Adapter, AdapterContext, Method, Model};
use crate::classifier::ZeroShotHead;
use crate::encoders::{
    mix_seed, train_source, Encoder, EmbeddingDataset, FrozenTable, Labeled, RawDataset,
    RawEncoder, ToyEncoder, TrainReport, Views,
};
use crate::error::{Error, Result};
use crate::numerics::{BnMode, NumericsError};
use crate::prototypes::{
    load_prompt_bank, mean_prototype, merge_banks, PromptBank, PrototypeSet,
};
use crate::streams::{build_stream, generate_synthetic, Batch, Scenario, SyntheticWorld};

const ENCODER_SALT: u64 = 0xE4C0_0001;
const TRAIN_SALT: u64 = 0xE4C0_0002;

/// Trained or loaded encoder, ready to be cloned into adapters.
#[derive(Debug, Clone)]
pub enum SourceEncoder {
    Raw(RawEncoder),
    Frozen(FrozenTable),
}

impl SourceEncoder {
    pub fn boxed(&self) -> Box<dyn Encoder> {
        match self {
            SourceEncoder::Raw(e) => Box::new(e.clone()),
            SourceEncoder::Frozen(e) => Box::new(e.clone()),
        }
    }

    fn labeled(&self) -> &dyn Labeled {
        match self {
            SourceEncoder::Raw(e) => e,
            SourceEncoder::Frozen(e) => e,
        }
    }

    pub fn labels(&self) -> &[usize] {
        self.labeled().labels()
    }

    pub fn domain_ids(&self) -> &[usize] {
        self.labeled().domain_ids()
    }

    pub fn domain_names(&self) -> &[String] {
        self.labeled().domain_names()
    }

    pub fn class_names(&self) -> &[String] {
        self.labeled().class_names()
    }
}

/// Everything a run needs before the first batch, shared by runs that
/// differ only in the method.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub encoder: SourceEncoder,
    pub prototypes: PrototypeSet,
    pub inv_temperature: f64,
    pub training: Option<TrainReport>,
    /// Held-out clean inputs used for the prototypes, when synthetic.
    pub heldout: Option<Arc<RawDataset>>,
}

impl Prepared {
    pub fn model(&self) -> Result<Model> {
        let head = ZeroShotHead::new(self.prototypes.clone(), self.inv_temperature)?;
        Model::new(self.encoder.boxed(), head)
    }
}

fn load_banks(cfg: &ExperimentConfig) -> Result<PromptBank> {
    let mut banks = cfg.prompts.banks.iter();
    let first = banks
        .next()
        .ok_or_else(|| Error::Config("no prompt banks configured".into()))?;
    let mut bank = load_prompt_bank(first)?;
    for p in banks {
        bank = merge_banks(&bank, &load_prompt_bank(p)?)?;
    }
    Ok(bank)
}

fn check_classes(bank: &PromptBank, names: &[String]) -> Result<()> {
    if bank.class_names() != names {
        return Err(Error::Config(format!(
            "prompt classes {:?} do not match dataset classes {:?}",
            bank.class_names(),
            names
        )));
    }
    Ok(())
}

/// Source training and prototype construction on a synthetic world.
pub fn prepare_synthetic(cfg: &ExperimentConfig, world: SyntheticWorld) -> Result<Prepared> {
    let spec = &cfg.data.synthetic;
    let mut net = ToyEncoder::new(cfg.encoder.toy(spec.d_in), mix_seed(cfg.seed, ENCODER_SALT));
    let report = train_source(
        &mut net,
        &world.train.inputs,
        &world.train.labels,
        spec.num_classes,
        &cfg.encoder.train,
        mix_seed(cfg.seed, TRAIN_SALT),
    )?;
    let bank = if cfg.prompts.banks.is_empty() {
        let z = net.embed(&world.heldout.inputs, BnMode::Eval)?;
        let mut lists = vec![Vec::new(); spec.num_classes];
        for (row, &y) in z.iter_rows().zip(&world.heldout.labels) {
            lists[y].push(row.to_vec());
        }
        PromptBank::from_raw(world.heldout.class_names.clone(), lists, z.cols(), "heldout")?
    } else {
        load_banks(cfg)?
    };
    check_classes(&bank, &world.test.class_names)?;
    let prototypes = mean_prototype(&bank)?;
    let encoder = RawEncoder::new(net, Arc::new(world.test), cfg.encoder.augment)?;
    Ok(Prepared {
        encoder: SourceEncoder::Raw(encoder),
        prototypes,
        inv_temperature: cfg.classifier.inv_temperature,
        training: Some(report),
        heldout: Some(Arc::new(world.heldout)),
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    match cfg.data.ttae_path() {
        None => prepare_synthetic(cfg, generate_synthetic(&cfg.data.synthetic, cfg.seed)?),
        Some(path) => {
            let table = EmbeddingDataset::load(path)?;
            let bank = load_banks(cfg)?;
            check_classes(&bank, table.class_names())?;
            Ok(Prepared {
                encoder: SourceEncoder::Frozen(FrozenTable::new(Arc::new(table))),
                prototypes: mean_prototype(&bank)?,
                inv_temperature: cfg.classifier.inv_temperature,
                training: None,
                heldout: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub domain: usize,
    pub errors: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub name: String,
    pub errors: usize,
    pub samples: usize,
    /// Percent.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: Method,
    pub scenario: Scenario,
    pub seed: u64,
    pub config_hash: String,
    pub stream_fingerprint: String,
    pub batches: Vec<BatchRecord>,
    pub domains: Vec<DomainError>,
    pub errors: usize,
    pub samples: usize,
    /// Overall online error, percent.
    pub error: f64,
    /// Wall-clock seconds; kept out of written files so they stay
    /// byte-deterministic.
    #[serde(skip)]
    pub seconds: f64,
}

impl ResultRecord {
    pub fn domain_error(&self, name: &str) -> Option<f64> {
        self.domains.iter().find(|d| d.name == name).map(|d| d.error)
    }
}

fn percent(errors: usize, samples: usize) -> f64 {
    if samples == 0 {
        0.0
    } else {
        100.0 * errors as f64 / samples as f64
    }
}

fn abort_at(batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(n) => Error::NumericalAbort { batch, source: n },
        other => other,
    }
}

/// The batches a configuration produces on prepared data.
pub fn stream_for(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<Batch>> {
    let enc = &prep.encoder;
    build_stream(
        enc.labels(),
        enc.domain_ids(),
        enc.domain_names().len(),
        &cfg.stream_spec(),
    )
}

pub fn adapter_for(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Box<dyn Adapter>> {
    let ctx = AdapterContext {
        seed: cfg.seed,
        correlated: cfg.stream.scenario == Scenario::Correlated,
        accumulate: (cfg.method.accumulate > 0).then_some(cfg.method.accumulate),
    };
    build_adapter(cfg.method.name, &cfg.methods, prep.model()?, &ctx)
}

/// Runs the configured method over the stream, returning the record and
/// the adapter in its final state.
pub fn run_with_adapter(
    cfg: &ExperimentConfig,
    prep: &Prepared,
) -> Result<(ResultRecord, Box<dyn Adapter>)> {
    let start = Instant::now();
    let stream = stream_for(cfg, prep)?;
    let mut adapter = adapter_for(cfg, prep)?;
    let names = prep.encoder.domain_names().to_vec();
    let mut per_domain = vec![(0usize, 0usize); names.len()];
    let mut batches = Vec::with_capacity(stream.len());
    for batch in &stream {
        let pred = adapter
            .adapt_and_predict(batch)
            .map_err(abort_at(batch.index))?;
        if !pred.probs.is_finite() {
            return Err(Error::NumericalAbort {
                batch: batch.index,
                source: NumericsError::NonFinite { op: "predict" },
            });
        }
        // one row per domain present in the batch, in domain order
        let mut counts = std::collections::BTreeMap::new();
        for (i, &d) in batch.domains.iter().enumerate() {
            let e = counts.entry(d).or_insert((0usize, 0usize));
            e.0 += usize::from(pred.labels[i] != batch.labels[i]);
            e.1 += 1;
        }
        for (d, (errors, size)) in counts {
            per_domain[d].0 += errors;
            per_domain[d].1 += size;
            batches.push(BatchRecord {
                batch: batch.index,
                domain: d,
                errors,
                size,
            });
        }
    }
    let errors: usize = per_domain.iter().map(|d| d.0).sum();
    let samples: usize = per_domain.iter().map(|d| d.1).sum();
    let domains = names
        .into_iter()
        .zip(&per_domain)
        .filter(|(_, d)| d.1 > 0)
        .map(|(name, &(e, n))| DomainError {
            name,
            errors: e,
            samples: n,
            error: percent(e, n),
        })
        .collect();
    let record = ResultRecord {
        method: cfg.method.name,
        scenario: cfg.stream.scenario,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        stream_fingerprint: cfg.stream_fingerprint(),
        batches,
        domains,
        errors,
        samples,
        error: percent(errors, samples),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, adapter))
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ResultRecord> {
    Ok(run_with_adapter(cfg, prep)?.0)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    run_prepared(cfg, &prepare(cfg)?)
}

/// Runs every method on shared prepared data, in parallel.
pub fn compare(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    methods: &[Method],
) -> Result<Vec<ResultRecord>> {
    let configs = methods
        .iter()
        .map(|m| cfg.with_overrides(&[format!("method.name=\"{m}\"")]))
        .collect::<Result<Vec<_>>>()?;
    run_parallel(&configs, prep)
}

/// Runs configurations that share `prep` on separate threads; results come
/// back in input order.
pub fn run_parallel(configs: &[ExperimentConfig], prep: &Prepared) -> Result<Vec<ResultRecord>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(configs.len().max(1));
    let mut results: Vec<Option<Result<ResultRecord>>> = (0..configs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = run_prepared(&configs[i], prep);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

/// Error as a function of the number of augmented views.
pub fn sweep_views(cfg: &ExperimentConfig, prep: &Prepared, counts: &[usize]) -> Result<SweepResult> {
    let method = cfg.method.name;
    let key = match method {
        Method::Vte => "methods.vte.n_views",
        Method::Tpt => "methods.tpt.n_views",
        other => {
            return Err(Error::Config(format!(
                "view sweeps need vte or tpt, got {other}"
            )))
        }
    };
    let mut configs = vec![cfg.with_overrides(&["method.name=\"source\"".into()])?];
    for &n in counts {
        configs.push(cfg.with_overrides(&[format!("{key}={n}")])?);
    }
    let mut records = run_parallel(&configs, prep)?.into_iter();
    let baseline = records.next().expect("baseline run").error;
    let points = counts
        .iter()
        .zip(records)
        .map(|(&n_views, r)| SweepPoint {
            n_views,
            error: r.error,
        })
        .collect();
    Ok(SweepResult {
        method,
        source_error: baseline,
        points,
    })
}

/// Canonical-view embeddings of every sample under the adapter's current
/// parameters, as a single-view table.
pub fn dump_embeddings(adapter: &mut dyn Adapter, prep: &Prepared) -> Result<EmbeddingDataset> {
    let enc = &prep.encoder;
    let n = enc.labels().len();
    let ids: Vec<usize> = (0..n).collect();
    let model = adapter.model_mut();
    let mut data = Vec::with_capacity(n * model.encoder.dim());
    for chunk in ids.chunks(1024) {
        let z = model.embeddings(chunk)?;
        data.extend(z.data().iter().map(|&x| x as f32));
    }
    EmbeddingDataset::new(
        n,
        1,
        model.encoder.dim(),
        enc.class_names().to_vec(),
        enc.domain_names().to_vec(),
        enc.labels().to_vec(),
        enc.domain_ids().to_vec(),
        data,
    )
}

/// Materializes a synthetic benchmark as files: the test set embedded with
/// the trained source encoder (`n_views` views, view 0 canonical) and the
/// held-out embeddings as a prompt bank.
pub fn export_synthetic(cfg: &ExperimentConfig, n_views: usize) -> Result<(EmbeddingDataset, PromptBank)> {
    let prep = prepare_synthetic(cfg, generate_synthetic(&cfg.data.synthetic, cfg.seed)?)?;
    let SourceEncoder::Raw(mut enc) = prep.encoder.clone() else {
        unreachable!("synthetic data uses the trainable encoder")
    };
    let n = enc.num_samples();
    let views = Views::Augmented {
        n_views,
        seed: crate::adapters::view_seed(cfg.seed),
    };
    let mut data = Vec::with_capacity(n * n_views * enc.dim());
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(256) {
        let z = enc.embed(chunk, &views, BnMode::Eval)?;
        data.extend(z.data().iter().map(|&x| x as f32));
    }
    let table = EmbeddingDataset::new(
        n,
        n_views,
        enc.dim(),
        enc.class_names().to_vec(),
        enc.domain_names().to_vec(),
        enc.labels().to_vec(),
        enc.domain_ids().to_vec(),
        data,
    )?;
    let heldout = prep.heldout.as_ref().expect("synthetic preparation keeps held-out data");
    let z = enc.net().clone().embed(&heldout.inputs, BnMode::Eval)?;
    let mut lists = vec![Vec::new(); heldout.num_classes()];
    for (row, &y) in z.iter_rows().zip(&heldout.labels) {
        lists[y].push(row.to_vec());
    }
    let bank = PromptBank::from_raw(heldout.class_names.clone(), lists, z.cols(), "heldout")?;
    Ok((table, bank))
}
