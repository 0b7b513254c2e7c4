#![allow(dead_code)]

use tta_core::adapters::{build_adapter, Adapter, AdapterContext, Method, MethodSettings, Prediction};
use tta_core::harness::{self, ExperimentConfig, Prepared};
use tta_core::streams::Batch;

/// A reduced synthetic benchmark that prepares in well under a second.
pub fn small_config(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "data.synthetic.samples_per_domain=320",
        "data.synthetic.train_per_class=80",
        "data.synthetic.heldout_per_class=20",
        "encoder.train.epochs=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::synthetic_benchmark(&o).unwrap()
}

pub fn prepared(cfg: &ExperimentConfig) -> (Prepared, Vec<Batch>) {
    let prep = harness::prepare(cfg).unwrap();
    let stream = harness::stream_for(cfg, &prep).unwrap();
    (prep, stream)
}

pub fn adapter(method: Method, settings: &MethodSettings, prep: &Prepared, correlated: bool) -> Box<dyn Adapter> {
    let ctx = AdapterContext {
        seed: 0,
        correlated,
        accumulate: None,
    };
    build_adapter(method, settings, prep.model().unwrap(), &ctx).unwrap()
}

pub fn run(adapter: &mut dyn Adapter, stream: &[Batch]) -> Vec<Prediction> {
    stream
        .iter()
        .map(|b| adapter.adapt_and_predict(b).unwrap())
        .collect()
}

/// Bit patterns of every probability, for exact comparison.
pub fn bits(preds: &[Prediction]) -> Vec<u64> {
    preds
        .iter()
        .flat_map(|p| p.probs.data().iter().map(|x| x.to_bits()))
        .collect()
}

pub fn params_of(a: &dyn Adapter) -> Vec<u64> {
    let p = a.model().encoder.params().unwrap();
    p.flatten(&p.all_ids()).iter().map(|x| x.to_bits()).collect()
}
