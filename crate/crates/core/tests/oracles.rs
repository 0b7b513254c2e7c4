//! Selections and means checked against brute-force reference
//! implementations, plus numeric invariants of the classifier path.

use proptest::prelude::*;
use tta_core::adapters::{deyo_kept, vte_select};
use tta_core::classifier::{confidence_filter, predict, FilterMode, FilterRule, ZeroShotHead};
use tta_core::numerics::{entropy, softmax_rows, Graph, Tensor};
use tta_core::prototypes::{mean_prototype, merge_banks, PromptBank, PrototypeSet};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Every permutation of `0..n`, generated by Heap's algorithm.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k - 1 {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
        heap(k - 1, a, out);
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// The unique ordering that is non-decreasing in entropy with ties by index,
/// found by scanning all permutations.
fn brute_order(e: &[f64]) -> Vec<usize> {
    let le = |a: usize, b: usize| e[a] < e[b] || (e[a] == e[b] && a < b);
    let mut found: Vec<Vec<usize>> = permutations(e.len())
        .into_iter()
        .filter(|p| p.windows(2).all(|w| le(w[0], w[1])))
        .collect();
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

fn brute_filter(e: &[f64], rule: &FilterRule) -> Vec<usize> {
    let order = brute_order(e);
    let b = e.len();
    let floor = rule.minimum_kept.min(b);
    let mut kept = match rule.mode {
        FilterMode::TopFraction(rho) => {
            let mut k = 0;
            while (k + 1) as f64 <= rho * b as f64 {
                k += 1;
            }
            order[..k.max(floor).min(b)].to_vec()
        }
        FilterMode::Threshold(beta) => {
            let passing: Vec<usize> = order.iter().copied().filter(|&i| e[i] <= beta).collect();
            if passing.len() >= floor {
                passing
            } else {
                order[..floor].to_vec()
            }
        }
    };
    kept.sort();
    kept
}

/// Entropies drawn from a small grid so ties are common.
fn entropies(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..6).prop_map(|v| v as f64 * 0.25), 1..=max_len)
}

fn rule() -> impl Strategy<Value = FilterRule> {
    let mode = prop_oneof![
        (0.01f64..=1.0).prop_map(FilterMode::TopFraction),
        (0.0f64..1.5).prop_map(FilterMode::Threshold),
    ];
    (mode, 1usize..4).prop_map(|(mode, minimum_kept)| FilterRule { mode, minimum_kept })
}

fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3),
        rows,
    )
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn bank_strategy(k: usize, dim: usize) -> impl Strategy<Value = PromptBank> {
    prop::collection::vec(
        (1usize..5).prop_flat_map(move |j| unit_rows(j, dim)),
        k,
    )
    .prop_map(move |lists| PromptBank::from_raw(names(k), lists, dim, "test").unwrap())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn confidence_filter_matches_permutation_search(e in entropies(7), rule in rule()) {
        prop_assert_eq!(confidence_filter(&e, &rule), brute_filter(&e, &rule));
    }

    #[test]
    fn vte_mean_matches_direct_average(
        (n, d, views) in (1usize..8, 1usize..6)
            .prop_flat_map(|(n, d)| (Just(n), Just(d), prop::collection::vec(-2.0f64..2.0, n * d))),
        salt in any::<u64>(),
        rho in 0.05f64..=1.0,
    ) {
        let e: Vec<f64> = (0..n).map(|i| ((salt >> (i % 60)) % 5) as f64 * 0.3).collect();
        let rule = FilterRule::top_fraction(rho);
        let table = Tensor::matrix(n, d, views.clone()).unwrap();
        let (selected, mean) = vte_select(&table, &e, &rule);
        let expected_sel = brute_filter(&e, &rule);
        prop_assert_eq!(&selected, &expected_sel);
        for c in 0..d {
            let col: f64 = expected_sel.iter().rev().map(|&v| views[v * d + c]).sum();
            let want = col / expected_sel.len() as f64;
            prop_assert!((mean[c] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn mean_prototype_matches_direct_average(bank in (2usize..6, 1usize..6).prop_flat_map(|(k, d)| bank_strategy(k, d))) {
        let mut want = Vec::new();
        for k in 0..bank.num_classes() {
            let mut acc = vec![0.0; bank.dim()];
            for p in bank.prompts(k).iter().rev() {
                for (a, x) in acc.iter_mut().zip(p) {
                    *a += x;
                }
            }
            let j = bank.prompts(k).len() as f64;
            want.push(acc.into_iter().map(|a| a / j).collect::<Vec<f64>>());
        }
        let norms: Vec<f64> = want.iter().map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        match mean_prototype(&bank) {
            Ok(set) => {
                for (k, m) in want.iter().enumerate() {
                    for (a, b) in set.prototype(k).iter().zip(normalized(m)) {
                        prop_assert!((a - b).abs() <= 1e-9);
                    }
                }
            }
            // cancelling prompts leave no direction to normalize
            Err(_) => prop_assert!(norms.iter().any(|&n| n < 1e-9)),
        }
    }

    #[test]
    fn merged_bank_is_count_weighted_mean(
        (a, b) in (2usize..5, 1usize..5).prop_flat_map(|(k, d)| (bank_strategy(k, d), bank_strategy(k, d)))
    ) {
        let merged = merge_banks(&a, &b).unwrap();
        let proto = mean_prototype(&merged);
        prop_assume!(proto.is_ok());
        let proto = proto.unwrap();
        for k in 0..a.num_classes() {
            let (ja, jb) = (a.prompts(k).len() as f64, b.prompts(k).len() as f64);
            let sum = |bank: &PromptBank, c: usize| bank.prompts(k).iter().map(|p| p[c]).sum::<f64>();
            let raw: Vec<f64> = (0..a.dim())
                .map(|c| (ja * sum(&a, c) / ja + jb * sum(&b, c) / jb) / (ja + jb))
                .collect();
            prop_assume!(raw.iter().map(|x| x * x).sum::<f64>() > 1e-10);
            for (x, y) in proto.prototype(k).iter().zip(normalized(&raw)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            prop_assert_eq!(merged.prompts(k).len(), a.prompts(k).len() + b.prompts(k).len());
        }
    }

    #[test]
    fn deyo_kept_set_matches_brute_force(
        rows in prop::collection::vec((0u8..8, -4i8..=4), 0..12),
        bound in prop_oneof![Just(f64::INFINITY), 0.0f64..2.0],
        threshold in prop_oneof![Just(-1.0), -0.5f64..0.5],
    ) {
        let e: Vec<f64> = rows.iter().map(|r| r.0 as f64 * 0.25).collect();
        let plpd: Vec<f64> = rows.iter().map(|r| r.1 as f64 * 0.125).collect();
        let mut want = Vec::new();
        for i in 0..e.len() {
            let drop_entropy = !(e[i] < bound);
            let drop_plpd = !(plpd[i] > threshold);
            if !(drop_entropy || drop_plpd) {
                want.push(i);
            }
        }
        prop_assert_eq!(deyo_kept(&e, &plpd, bound, threshold), want);
    }

    #[test]
    fn argmax_ignores_temperature(
        (k, d, protos, z) in (2usize..6, 2usize..6).prop_flat_map(|(k, d)| (Just(k), Just(d), unit_rows(k, d), unit_rows(4, d))),
        t1 in 0.5f64..200.0,
        t2 in 0.5f64..200.0,
    ) {
        let p = PrototypeSet::new(names(k), Tensor::from_rows(&protos).unwrap()).unwrap();
        let z = Tensor::from_rows(&z).unwrap();
        let sims = ZeroShotHead::new(p.clone(), 1.0).unwrap().similarities(&z).unwrap();
        // near-ties may break either way once the logits are rounded
        let mut sorted: Vec<Vec<f64>> = sims.iter_rows().map(|r| r.to_vec()).collect();
        for r in &mut sorted {
            r.sort_by(|a, b| b.total_cmp(a));
        }
        prop_assume!(sorted.iter().all(|r| r[0] - r[1] > 1e-9));
        let a = predict(&ZeroShotHead::new(p.clone(), t1).unwrap().probabilities_of(&z).unwrap());
        let b = predict(&ZeroShotHead::new(p, t2).unwrap().probabilities_of(&z).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!(sims.data().iter().all(|s| s.abs() <= 1.0 + 1e-12));
        let _ = d;
    }

    #[test]
    fn softmax_and_entropy_bounds(
        (k, logits) in (2usize..12).prop_flat_map(|k| (Just(k), prop::collection::vec(-50.0f64..50.0, 3 * k)))
    ) {
        let p = softmax_rows(&Tensor::matrix(3, k, logits).unwrap());
        for row in p.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        for h in entropy(&p).unwrap() {
            prop_assert!(h >= -1e-12 && h <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(rows in (1usize..8).prop_flat_map(|d| unit_rows(4, d))) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = g.l2_normalize(x).unwrap();
        for row in g.value(y).iter_rows() {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_standardizes_columns(
        (b, d, data) in (2usize..10, 1usize..6).prop_flat_map(|(b, d)| (Just(b), Just(d), prop::collection::vec(-3.0f64..3.0, b * d)))
    ) {
        let eps = 1e-5;
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(b, d, data.clone()).unwrap());
        let gamma = g.constant(Tensor::full(&[d], 1.0));
        let beta = g.constant(Tensor::zeros(&[d]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, eps).unwrap();
        let out = g.value(y);
        for c in 0..d {
            let col: Vec<f64> = (0..b).map(|r| data[r * d + c]).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
            prop_assert!((stats.mean[c] - mean).abs() < 1e-12);
            prop_assert!((stats.var[c] - var).abs() < 1e-12);
            let ys: Vec<f64> = (0..b).map(|r| out.row(r)[c]).collect();
            let ym = ys.iter().sum::<f64>() / b as f64;
            let yv = ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / b as f64;
            prop_assert!(ym.abs() < 1e-9);
            prop_assert!((yv - var / (var + eps)).abs() < 1e-9);
        }
    }
}

#[test]
fn permutation_generator_is_complete() {
    let p = permutations(5);
    assert_eq!(p.len(), 120);
    let mut sorted = p.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 120);
}
