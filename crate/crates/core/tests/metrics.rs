//! Accuracy, F1 and perplexity against brute-force oracles, plus the grid
//! runner and plot tables.

mod common;

use reviewgan::corpus::{Class, Example, START};
use reviewgan::eval::{accuracy, emit_plot_data, f1, f1_for, perplexity, run_grid, GridSpec, Pool, Variant};
use reviewgan::generator::GeneratorParams;

fn class_vectors(n: usize) -> Vec<Vec<Class>> {
    (0..1usize << n)
        .map(|bits| {
            (0..n)
                .map(|i| if bits >> i & 1 == 1 { Class::Spam } else { Class::NonSpam })
                .collect()
        })
        .collect()
}

#[test]
fn accuracy_and_f1_match_brute_force_for_small_n() {
    for n in 1..=8 {
        let all = class_vectors(n);
        for pred in &all {
            for gold in &all {
                let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
                assert_eq!(accuracy(pred, gold).unwrap(), hits as f64 / n as f64);

                let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == Class::Spam && g == Class::Spam).count() as f64;
                let pp = pred.iter().filter(|&&p| p == Class::Spam).count() as f64;
                let gp = gold.iter().filter(|&&g| g == Class::Spam).count() as f64;
                let expect = if tp == 0.0 { 0.0 } else { 2.0 * tp / (pp + gp) };
                let got = f1(pred, gold).unwrap();
                assert!((got - expect).abs() < 1e-12, "pred {pred:?} gold {gold:?}: {got} vs {expect}");

                let tn = pred.iter().zip(gold).filter(|&(&p, &g)| p == Class::NonSpam && g == Class::NonSpam).count() as f64;
                let expect_neg = if tn == 0.0 { 0.0 } else { 2.0 * tn / ((n as f64 - pp) + (n as f64 - gp)) };
                let got_neg = f1_for(pred, gold, Class::NonSpam).unwrap();
                assert!((got_neg - expect_neg).abs() < 1e-12);
            }
        }
    }
}

fn uniform_generator(vocab: usize) -> GeneratorParams {
    let mut g = GeneratorParams::new(vocab, 3, 2, 4, 1, &mut common::rng(1));
    g.output.w.fill(0.0);
    g.output.b.fill(0.0);
    g
}

#[test]
fn uniform_generator_perplexity_is_its_support_size() {
    // <start> and <pad> are never emitted, so 12 ids leave 10 outcomes.
    let g = uniform_generator(12);
    let test: Vec<_> = common::toy_batch(3, 12, 9, 20)
        .into_iter()
        .map(|s| (s, Class::Spam))
        .collect();
    let ppl = perplexity(&g, &test).unwrap();
    assert!((ppl - 10.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn confident_correct_generator_has_unit_perplexity() {
    let mut g = uniform_generator(8);
    g.output.b[[0, 5]] = 60.0;
    let test = vec![(common::seq(&[START, 5, 3, 3]), Class::NonSpam)];
    let ppl = perplexity(&g, &test).unwrap();
    assert!((ppl - 1.0).abs() < 1e-12, "{ppl}");
}

#[test]
fn perplexity_ignores_order_and_batching() {
    let g = GeneratorParams::new(11, 4, 3, 6, 2, &mut common::rng(2));
    let test: Vec<_> = common::toy_batch(4, 11, 8, 150)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, Class::ALL[i % 2]))
        .collect();
    let a = perplexity(&g, &test).unwrap();
    let mut rev = test.clone();
    rev.reverse();
    let b = perplexity(&g, &rev).unwrap();
    let pieces: Vec<f64> = test.chunks(7).map(|c| perplexity(&g, c).unwrap()).collect();
    assert!((a - b).abs() / a < 1e-6);
    // Recombining per-chunk results through their token counts recovers
    // the whole-set value.
    let counts: Vec<f64> = test
        .chunks(7)
        .map(|c| c.iter().map(|(s, _)| (s.content_len() - 1) as f64).sum())
        .collect();
    let total: f64 = counts.iter().sum();
    let combined = (pieces.iter().zip(&counts).map(|(p, n)| p.ln() * n).sum::<f64>() / total).exp();
    assert!((a - combined).abs() / a < 1e-6);
    assert!(perplexity(&g, &[]).is_err());
}

fn tiny_pool() -> Pool {
    let (_, _, vocabulary) = common::smoke_setup();
    let src = reviewgan::synthetic::MarkovSource::new(10, 3, 1.0, 14, 5).unwrap();
    let (lab, unl) = src.corpus(24, 8, 2);
    let enc = |t: &str| reviewgan::corpus::encode(t, &vocabulary, 16).unwrap();
    Pool {
        labeled: lab.iter().map(|(t, c)| Example::labeled(enc(t), *c)).collect(),
        unlabeled: unl.iter().map(|t| Example::unlabeled(enc(t))).collect(),
        vocabulary,
    }
}

#[test]
fn grid_has_one_record_per_cell_and_is_deterministic() {
    let (config, _, _) = common::smoke_setup();
    let pool = tiny_pool();
    let grid = GridSpec {
        labeled_fractions: vec![0.5, 1.0],
        unlabeled_fractions: vec![0.0, 1.0],
        seeds: vec![1, 2],
        test_fraction: 0.25,
        include_baseline: true,
    };
    let a = run_grid(&config, &pool, &grid).unwrap();
    assert_eq!(a.records.len(), 8);
    assert_eq!(a.baseline_records.len(), 4);
    assert!(a.records.iter().all(|r| r.error.is_none() && r.variant == Variant::Full));
    for r in &a.records {
        let (acc, f, ppl) = (r.accuracy.unwrap(), r.f1.unwrap(), r.perplexity.unwrap());
        assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f));
        assert!(ppl >= 1.0);
    }
    // 4 full cells + 2 baseline cells, each over both seeds.
    assert_eq!(a.aggregates.len(), 6);
    assert!(a.aggregates.iter().all(|g| g.accuracy.unwrap().n == 2 && g.accuracy.unwrap().std.is_some()));
    let b = run_grid(&config, &pool, &grid).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let out = emit_plot_data(&a, dir.path()).unwrap();
    assert_eq!(out.files.len(), 3);
    assert!(out.warnings.is_empty());
    let acc = std::fs::read_to_string(&out.files[0]).unwrap();
    assert_eq!(acc.lines().count(), 1 + 6);
    assert!(acc.lines().next().unwrap().starts_with("series\tx\tmean\tstd"));
    let ppl = std::fs::read_to_string(&out.files[2]).unwrap();
    assert_eq!(ppl.lines().count(), 1 + 4);
}

#[test]
fn failed_cells_are_recorded_and_left_out_of_plots() {
    let (config, _, _) = common::smoke_setup();
    let pool = tiny_pool();
    let grid = GridSpec {
        labeled_fractions: vec![1.0, 1.5],
        unlabeled_fractions: vec![1.0],
        seeds: vec![3],
        test_fraction: 0.25,
        include_baseline: false,
    };
    let report = run_grid(&config, &pool, &grid).unwrap();
    assert_eq!(report.records.len(), 2);
    assert!(report.records[0].error.is_none());
    assert!(report.records[1].error.is_some());
    let dir = tempfile::tempdir().unwrap();
    let out = emit_plot_data(&report, dir.path()).unwrap();
    assert!(!out.warnings.is_empty());
    let acc = std::fs::read_to_string(&out.files[0]).unwrap();
    assert_eq!(acc.lines().count(), 2);
    assert!(acc.contains("\tNA\t"));
}
