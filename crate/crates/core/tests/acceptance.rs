//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs as a plain binary (`harness = false`).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tta_core::adapters::{
    build_adapter, deyo_kept, vte_select, Accumulate, Adapter, AdapterContext, KalmanState, Method,
    MethodSettings, PriorMode,
};
use tta_core::classifier::{confidence_filter, FilterMode, FilterRule};
use tta_core::harness::{self, write_run, ExperimentConfig, Prepared};
use tta_core::numerics::{
    BatchNorm, BnMode, Gradients, Graph, LayerNorm, Linear, ParamSet, Scope, Tensor, Var,
};
use tta_core::prototypes::{mean_prototype, PromptBank};
use tta_core::streams::{Batch, Scenario};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const GRAD_NETS: usize = 100;
const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 30.0;
const ORACLE_INSTANCES: usize = 200;
const MEAN_TOL: f64 = 1e-9;
const EMA_TOL: f64 = 1e-12;
const BN1_MARGIN: f64 = 5.0;
const BN1_SECONDS: f64 = 120.0;
const ROID_GAIN: f64 = 1.0;
const ROID_SEED_SLACK: f64 = 0.5;
const ROID_SECONDS: f64 = 600.0;
const PRIOR_GAIN: f64 = 1.0;
const VIEW_COUNTS: [usize; 5] = [1, 8, 16, 32, 64];
const VIEW_STEP_TOL: f64 = 0.5;
const ACCUM_WINDOW: usize = 64;
const ACCUM_BATCHES: usize = 10;
const ACCUM_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn benchmark(extra: &[String]) -> ExperimentConfig {
    ExperimentConfig::synthetic_benchmark(extra).unwrap()
}

fn with(cfg: &ExperimentConfig, o: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = o.iter().map(|s| s.to_string()).collect();
    cfg.with_overrides(&o).unwrap()
}

fn error(cfg: &ExperimentConfig, prep: &Prepared, o: &[&str]) -> f64 {
    harness::run_prepared(&with(cfg, o), prep).unwrap().error
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- autodiff

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone)]
struct Net {
    params: ParamSet,
    linear: Vec<Linear>,
    norms: Vec<Option<(Option<LayerNorm>, Option<BatchNorm>)>>,
    x: Tensor,
}

impl Net {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let depth = rng.random_range(1..=3);
        let d_in = rng.random_range(2..=32);
        let rows = rng.random_range(3..=6);
        let (mut linear, mut norms) = (Vec::new(), Vec::new());
        let mut width = d_in;
        for l in 0..depth {
            let out = rng.random_range(2..=32);
            linear.push(Linear::new(&mut params, &format!("l{l}"), width, out, rng));
            norms.push(match rng.random_range(0..3) {
                _ if l + 1 == depth => None,
                0 => None,
                1 => Some((Some(LayerNorm::new(&mut params, &format!("n{l}"), out)), None)),
                _ => Some((None, Some(BatchNorm::new(&mut params, &format!("n{l}"), out)))),
            });
            width = out;
        }
        for id in params.all_ids() {
            let noise = normal(rng, params.value(id).numel());
            params.value_mut(id).data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += 0.3 * e);
        }
        Self {
            x: Tensor::matrix(rows, d_in, normal(rng, rows * d_in)).unwrap(),
            params,
            linear,
            norms,
        }
    }

    fn loss(&mut self, g: &mut Graph, scope: &Scope) -> Var {
        let mut h = g.constant(self.x.clone());
        let depth = self.linear.len();
        for l in 0..depth {
            h = self.linear[l].forward(g, &self.params, scope, h).unwrap();
            match &mut self.norms[l] {
                Some((Some(ln), _)) => h = ln.forward(g, &self.params, scope, h).unwrap(),
                Some((_, Some(bn))) => h = bn.forward(g, &self.params, scope, h, BnMode::BatchStats).unwrap(),
                _ => {}
            }
            if l + 1 < depth {
                h = g.relu(h).unwrap();
            }
        }
        let z = g.l2_normalize(h).unwrap();
        let s = g.scale(z, 3.0).unwrap();
        let p = g.softmax(s).unwrap();
        let e = g.entropy_rows(p).unwrap();
        g.mean(e).unwrap()
    }
}

fn autodiff() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_NETS {
        let mut net = Net::random(&mut rng);
        let mut g = Graph::new();
        let loss = net.loss(&mut g, &Scope::All);
        let grads: Gradients = g.backward(loss).unwrap();
        for id in net.params.all_ids() {
            let n = net.params.value(id).numel();
            for _ in 0..n.min(32) {
                let c = rng.random_range(0..n);
                let mut probe = net.clone();
                let mut eval = |delta: f64| {
                    probe.params = net.params.clone();
                    probe.params.value_mut(id).data_mut()[c] += delta;
                    let mut g = Graph::new();
                    let l = probe.loss(&mut g, &Scope::Frozen);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads.get(id).unwrap().data()[c];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < GRAD_MAX_REL && secs < GRAD_SECONDS,
        format!("{GRAD_NETS} networks, max relative error {worst:.2e} (< {GRAD_MAX_REL:.0e}), {secs:.1}s"),
    )
}

// ----------------------------------------------------------------- oracles

fn brute_filter(e: &[f64], rule: &FilterRule) -> Vec<usize> {
    // the one permutation sorted by (entropy, index), found exhaustively
    fn search(e: &[f64], prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == e.len() {
            let ok = prefix
                .windows(2)
                .all(|w| e[w[0]] < e[w[1]] || (e[w[0]] == e[w[1]] && w[0] < w[1]));
            if ok {
                out.push(prefix.clone());
            }
            return;
        }
        for i in 0..e.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                search(e, prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut found = Vec::new();
    search(e, &mut Vec::new(), &mut vec![false; e.len()], &mut found);
    assert_eq!(found.len(), 1);
    let order = found.pop().unwrap();
    let b = e.len();
    let floor = rule.minimum_kept.min(b);
    let mut kept = match rule.mode {
        FilterMode::TopFraction(rho) => {
            let k = (0..=b).filter(|&k| k as f64 <= rho * b as f64).max().unwrap();
            order[..k.max(floor)].to_vec()
        }
        FilterMode::Threshold(beta) => {
            let passing: Vec<usize> = order.iter().copied().filter(|&i| e[i] <= beta).collect();
            if passing.len() >= floor { passing } else { order[..floor].to_vec() }
        }
    };
    kept.sort();
    kept
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = BTreeMap::<&str, usize>::new();
    let mut worst_mean: f64 = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let b = rng.random_range(1..=7);
        let e: Vec<f64> = (0..b).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
        let rule = FilterRule {
            mode: if rng.random_bool(0.5) {
                FilterMode::TopFraction(rng.random_range(0.05..=1.0))
            } else {
                FilterMode::Threshold(rng.random_range(0.0..1.2))
            },
            minimum_kept: rng.random_range(1..4),
        };
        let want = brute_filter(&e, &rule);
        *mismatches.entry("confidence_filter").or_default() += usize::from(confidence_filter(&e, &rule) != want);

        // VTE: views of one sample
        let d = rng.random_range(1..6);
        let views: Vec<f64> = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let top = FilterRule::top_fraction(rng.random_range(0.05..=1.0));
        let (sel, m) = vte_select(&Tensor::matrix(b, d, views.clone()).unwrap(), &e, &top);
        let want_sel = brute_filter(&e, &top);
        *mismatches.entry("vte selection").or_default() += usize::from(sel != want_sel);
        for c in 0..d {
            let direct = want_sel.iter().rev().map(|&v| views[v * d + c]).sum::<f64>() / want_sel.len() as f64;
            worst_mean = worst_mean.max((m[c] - direct).abs());
        }

        // mean prototype over a random bank
        let k = rng.random_range(2..5);
        let lists: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| (0..rng.random_range(1..5)).map(|_| normal(&mut rng, d + 1)).collect())
            .collect();
        let bank = PromptBank::from_raw((0..k).map(|i| i.to_string()).collect(), lists, d + 1, "t").unwrap();
        if let Ok(set) = mean_prototype(&bank) {
            for c in 0..k {
                let j = bank.prompts(c).len() as f64;
                let raw: Vec<f64> = (0..d + 1)
                    .map(|i| bank.prompts(c).iter().rev().map(|p| p[i]).sum::<f64>() / j)
                    .collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (a, r) in set.prototype(c).iter().zip(&raw) {
                    worst_mean = worst_mean.max((a - r / n).abs());
                }
            }
        }

        // DeYO kept set
        let plpd: Vec<f64> = (0..b).map(|_| rng.random_range(-4..=4) as f64 * 0.125).collect();
        let bound = if rng.random_bool(0.2) { f64::INFINITY } else { rng.random_range(0.0..1.2) };
        let tau = rng.random_range(-0.5..0.5);
        let want: Vec<usize> = (0..b).filter(|&i| !(e[i] >= bound) && !(plpd[i] <= tau)).collect();
        *mismatches.entry("deyo kept set").or_default() += usize::from(deyo_kept(&e, &plpd, bound, tau) != want);
    }
    let total: usize = mismatches.values().sum();
    outcome(
        total == 0 && worst_mean <= MEAN_TOL,
        format!(
            "{ORACLE_INSTANCES} instances each, selection mismatches {mismatches:?}, worst mean deviation {worst_mean:.1e} (≤ {MEAN_TOL:.0e})"
        ),
    )
}

// -------------------------------------------------------------- reductions

fn adapter(method: Method, s: &MethodSettings, prep: &Prepared) -> Box<dyn Adapter> {
    build_adapter(method, s, prep.model().unwrap(), &AdapterContext::default()).unwrap()
}

fn bit_run(a: &mut dyn Adapter, stream: &[Batch]) -> Vec<u64> {
    stream
        .iter()
        .flat_map(|b| a.adapt_and_predict(b).unwrap().probs.into_data().into_iter().map(f64::to_bits))
        .collect()
}

fn reductions(prep: &Prepared, cfg: &ExperimentConfig) -> Outcome {
    let stream = harness::stream_for(cfg, prep).unwrap();
    let mut failed = Vec::new();
    let base = &cfg.methods;

    let mut s = base.clone();
    s.sar.rho_sam = 0.0;
    s.sar.reset_threshold = f64::NEG_INFINITY;
    s.tent.filter_factor = Some(s.sar.e0_factor);
    if bit_run(adapter(Method::Sar, &s, prep).as_mut(), &stream) != bit_run(adapter(Method::Tent, &s, prep).as_mut(), &stream) {
        failed.push("sar(ρ=0) ≠ filtered tent");
    }

    let mut s = base.clone();
    s.deyo.plpd_threshold = -1.0;
    s.deyo.entropy_factor = f64::INFINITY;
    if bit_run(adapter(Method::Deyo, &s, prep).as_mut(), &stream) != bit_run(adapter(Method::Tent, &s, prep).as_mut(), &stream) {
        failed.push("deyo(τ=−1, ∞) ≠ tent");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, r) = (base.cmf.q, base.cmf.r);
    let alpha = KalmanState::steady_gain(q, r);
    let init: Vec<f64> = normal(&mut rng, 32);
    let mut kf = KalmanState::new(init.clone(), q, r, KalmanState::steady_variance(q, r)).unwrap();
    let mut ema = init;
    let mut worst_ema: f64 = 0.0;
    for _ in 0..1000 {
        let obs = normal(&mut rng, 32);
        kf.update(&obs).unwrap();
        ema.iter_mut().zip(&obs).for_each(|(e, o)| *e = (1.0 - alpha) * *e + alpha * o);
        for (a, b) in kf.estimate().iter().zip(&ema) {
            worst_ema = worst_ema.max((a - b).abs());
        }
    }
    if worst_ema > EMA_TOL {
        failed.push("constant-gain cmf ≠ ema");
    }

    let mut s = base.clone();
    s.tent.lr = 0.0;
    s.eta.lr = 0.0;
    s.sar.lr = 0.0;
    s.deyo.lr = 0.0;
    s.roid.lr = 0.0;
    s.cmf.lr = 0.0;
    s.roid.prior_correction = PriorMode::Off;
    s.cmf.prior_correction = PriorMode::Off;
    let source = bit_run(adapter(Method::Source, &s, prep).as_mut(), &stream);
    for m in [Method::Tent, Method::Eta, Method::Sar, Method::Deyo, Method::Roid, Method::Cmf] {
        if bit_run(adapter(m, &s, prep).as_mut(), &stream) != source {
            failed.push("lr=0 adapter ≠ source");
        }
    }

    let mut s = base.clone();
    s.vte.n_views = 1;
    if bit_run(adapter(Method::Vte, &s, prep).as_mut(), &stream) != source {
        failed.push("vte(1 view) ≠ source");
    }
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("5 reductions bit-exact over {} batches, ema deviation {worst_ema:.1e}", stream.len())
        } else {
            format!("{failed:?}")
        },
    )
}

// ------------------------------------------------------------- directional

fn bn1_degrades() -> Outcome {
    let start = Instant::now();
    let (mut src, mut bn1) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = benchmark(&[
            format!("seed={seed}"),
            "encoder.norm=\"batch_norm\"".into(),
            "stream.scenario=\"correlated\"".into(),
        ]);
        let prep = harness::prepare(&cfg).unwrap();
        src.push(error(&cfg, &prep, &["method.name=\"source\""]));
        bn1.push(error(&cfg, &prep, &["method.name=\"bn1\""]));
    }
    let secs = start.elapsed().as_secs_f64();
    let gap = mean(&bn1) - mean(&src);
    outcome(
        gap >= BN1_MARGIN && secs < BN1_SECONDS,
        format!(
            "BN toy, correlated: source {:.2}, bn1 {:.2} (gap {gap:.2} ≥ {BN1_MARGIN}), {secs:.1}s",
            mean(&src),
            mean(&bn1)
        ),
    )
}

struct SeedRuns {
    source: f64,
    roid: f64,
    cmf: f64,
    tent: f64,
    corr_source: f64,
    corr_roid_on: f64,
    corr_roid_off: f64,
    corr_tent: f64,
}

fn seed_runs(prep: &Prepared, cfg: &ExperimentConfig) -> SeedRuns {
    let corr = with(cfg, &["stream.scenario=\"correlated\""]);
    SeedRuns {
        source: error(cfg, prep, &["method.name=\"source\""]),
        roid: error(cfg, prep, &["method.name=\"roid\""]),
        cmf: error(cfg, prep, &["method.name=\"cmf\""]),
        tent: error(cfg, prep, &["method.name=\"tent\""]),
        corr_source: error(&corr, prep, &["method.name=\"source\""]),
        corr_roid_on: error(&corr, prep, &["method.name=\"roid\"", "methods.roid.prior_correction=\"on\""]),
        corr_roid_off: error(&corr, prep, &["method.name=\"roid\"", "methods.roid.prior_correction=\"off\""]),
        corr_tent: error(&corr, prep, &["method.name=\"tent\""]),
    }
}

fn roid_continual(runs: &[SeedRuns], secs: f64) -> Outcome {
    let pick = |f: fn(&SeedRuns) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let (src, roid, cmf) = (pick(|r| r.source), pick(|r| r.roid), pick(|r| r.cmf));
    let mean_ok = mean(&roid) <= mean(&src) - ROID_GAIN && mean(&cmf) <= mean(&src) - ROID_GAIN;
    let seed_ok = runs
        .iter()
        .all(|r| r.roid <= r.source + ROID_SEED_SLACK && r.cmf <= r.source + ROID_SEED_SLACK);
    outcome(
        mean_ok && seed_ok && secs < ROID_SECONDS,
        format!(
            "continual means: source {:.2}, roid {:.2}, cmf {:.2} (need ≤ source − {ROID_GAIN}); per seed source {} roid {} cmf {}; {secs:.0}s",
            mean(&src),
            mean(&roid),
            mean(&cmf),
            fmt(&src),
            fmt(&roid),
            fmt(&cmf)
        ),
    )
}

fn correlated_stability(runs: &[SeedRuns]) -> Outcome {
    let pick = |f: fn(&SeedRuns) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
    let (on, off) = (pick(|r| r.corr_roid_on), pick(|r| r.corr_roid_off));
    let cont_gain = pick(|r| r.source) - pick(|r| r.tent);
    let corr_gain = pick(|r| r.corr_source) - pick(|r| r.corr_tent);
    outcome(
        off - on >= PRIOR_GAIN && corr_gain <= cont_gain,
        format!(
            "correlated roid: prior on {on:.2}, off {off:.2} (gain {:.2} ≥ {PRIOR_GAIN}); tent improvement on source: continual {cont_gain:.2}, correlated {corr_gain:.2}; correlated source {:.2}",
            off - on,
            pick(|r| r.corr_source)
        ),
    )
}

fn view_curve(preps: &[(ExperimentConfig, Prepared)]) -> Outcome {
    let mut sums = vec![0.0; VIEW_COUNTS.len()];
    let mut source = 0.0;
    for (cfg, prep) in preps {
        let sweep = harness::sweep_views(&with(cfg, &["method.name=\"vte\""]), prep, &VIEW_COUNTS).unwrap();
        source += sweep.source_error / preps.len() as f64;
        for (s, p) in sums.iter_mut().zip(&sweep.points) {
            *s += p.error / preps.len() as f64;
        }
    }
    let steps: Vec<f64> = sums.windows(2).map(|w| w[1] - w[0]).collect();
    let ok = steps.iter().all(|&d| d <= VIEW_STEP_TOL);
    let curve = VIEW_COUNTS
        .iter()
        .zip(&sums)
        .map(|(n, e)| format!("{n}:{e:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        ok,
        format!(
            "vte 5-seed mean {curve}; steps {}; each step must be ≤ +{VIEW_STEP_TOL}; source {source:.2}",
            steps.iter().map(|d| format!("{d:+.2}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// --------------------------------------------------------------- protocol

fn protocol(preps: &[(ExperimentConfig, Prepared)]) -> Outcome {
    let mut problems = Vec::new();
    let mut checked = 0;
    for (cfg, prep) in preps {
        let n = prep.encoder.labels().len();
        for sc in ["continual", "correlated", "mixed"] {
            let c = with(cfg, &[&format!("stream.scenario=\"{sc}\"")]);
            let stream = harness::stream_for(&c, prep).unwrap();
            let mut ids: Vec<usize> = stream.iter().flat_map(|b| b.ids.clone()).collect();
            ids.sort();
            if ids != (0..n).collect::<Vec<_>>() {
                problems.push(format!("seed {} {sc}: not a bijection", cfg.seed));
            }
            if c.stream.scenario == Scenario::Correlated {
                let flat: Vec<(usize, usize)> = stream
                    .iter()
                    .flat_map(|b| b.domains.iter().copied().zip(b.labels.iter().copied()))
                    .collect();
                if !flat.windows(2).all(|w| w[0].0 != w[1].0 || w[0].1 <= w[1].1) {
                    problems.push(format!("seed {} correlated: unsorted", cfg.seed));
                }
            }
            checked += 1;
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    for (i, m) in ["source", "roid", "vte"].iter().enumerate() {
        let cfg = benchmark(&[
            format!("method.name=\"{m}\""),
            format!("seed={i}"),
            "stream.scenario=\"mixed\"".into(),
        ]);
        let mut bytes = Vec::new();
        for run in 0..2 {
            let dir = tmp.path().join(format!("{m}-{run}"));
            let record = harness::run_experiment(&cfg).unwrap();
            write_run(&cfg, &record, &dir).unwrap();
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
                })
                .collect();
            files.sort();
            bytes.push(files);
        }
        if bytes[0] != bytes[1] {
            problems.push(format!("{m}: outputs differ between runs"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{checked} streams bijective, correlated sorted, 3 end-to-end runs byte-identical")
        } else {
            problems.join("; ")
        },
    )
}

fn accumulation(prep: &Prepared, cfg: &ExperimentConfig) -> Outcome {
    let stream = harness::stream_for(cfg, prep).unwrap();
    let stream = &stream[..ACCUM_BATCHES];
    let full = stream.iter().all(|b| b.len() == ACCUM_WINDOW);
    let ctx = AdapterContext::default();
    let mut acc = Accumulate::build(Method::Tent, &cfg.methods, prep.model().unwrap(), &ctx, ACCUM_WINDOW).unwrap();
    let mut tent = adapter(Method::Tent, &cfg.methods, prep);
    for b in stream {
        acc.adapt_and_predict(b).unwrap();
        tent.adapt_and_predict(b).unwrap();
    }
    let p = acc.model().encoder.params().unwrap();
    let ids = p.all_ids();
    let dist = p.distance(tent.model().encoder.params().unwrap(), &ids);
    let moved = p.distance(prep.model().unwrap().encoder.params().unwrap(), &ids);
    outcome(
        full && dist <= ACCUM_TOL && moved > 0.0,
        format!("LN toy, {ACCUM_BATCHES} batches of {ACCUM_WINDOW}: distance {dist:.1e} (≤ {ACCUM_TOL:.0e}), moved {moved:.3}"),
    )
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("autodiff gradient check", autodiff());
    report("oracle equivalences", oracles());

    let preps: Vec<(ExperimentConfig, Prepared)> = SEEDS
        .iter()
        .map(|&s| {
            let cfg = benchmark(&[format!("seed={s}")]);
            let prep = harness::prepare(&cfg).unwrap();
            (cfg, prep)
        })
        .collect();
    report("reductions", reductions(&preps[0].1, &preps[0].0));
    report("bn1 degrades on correlated streams", bn1_degrades());

    let start = Instant::now();
    let runs: Vec<SeedRuns> = preps.iter().map(|(c, p)| seed_runs(p, c)).collect();
    report("roid and cmf beat source on continual streams", roid_continual(&runs, start.elapsed().as_secs_f64()));
    report("prior correction and tent on correlated streams", correlated_stability(&runs));
    report("vte error non-increasing in views", view_curve(&preps));
    report("protocol invariants", protocol(&preps));
    report("gradient accumulation equivalence", accumulation(&preps[0].1, &preps[0].0));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
