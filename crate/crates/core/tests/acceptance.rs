//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! and prints one `PASS`/`FAIL` line per criterion; exits non-zero if any fail.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use prodcat::container::{load_model, save_model, ModelContainer, RunMetadata};
use prodcat::corpus::{filter_to_taxonomy, stratified_kfold, train_val_split, Dataset, Product};
use prodcat::eval::{
    cross_platform_eval, evaluate, percent, rank_metric, render_crossval_table, render_fold_table, run_crossval,
    CrossValRow, MetricsReport,
};
use prodcat::features::Locale;
use prodcat::linear::LinearConfig;
use prodcat::model::{HierarchicalClassifier, LinearPipeline, Model, ModelFamily, ModelSpec};
use prodcat::neural::{masked_softmax, EncoderConfig, EncoderKind, NetworkConfig, TowerKind, TrainConfig};
use prodcat::synth::{embeddings_for, generate, generate_products, random_embeddings, SynthConfig};
use prodcat::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

fn masked_softmax_normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_outside, mut bounded_cases) = (0.0f64, 0.0f64, 0usize);
    let mut violations = 0;
    for _ in 0..10_000 {
        let s = rng.gen_range(1..=200);
        let logits: Vec<f64> = (0..s).map(|_| rng.gen_range(-50.0..=50.0)).collect();
        let density = rng.gen_range(0.0..1.0);
        let mask: Vec<bool> = (0..s).map(|_| rng.gen_bool(density)).collect();
        let probs = masked_softmax(&logits, &mask).unwrap().probs;
        let sum_err = (probs.iter().sum::<f64>() - 1.0).abs();
        worst_sum = worst_sum.max(sum_err);
        if sum_err > 1e-9 {
            violations += 1;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if logits.iter().zip(&mask).any(|(&o, &m)| m && max - o <= 5.0) {
            bounded_cases += 1;
            for (p, _) in probs.iter().zip(&mask).filter(|(_, &m)| !m) {
                worst_outside = worst_outside.max(*p);
                if *p >= 1e-3 {
                    violations += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && within(elapsed, 5),
        format!(
            "max |Σp−1| = {worst_sum:.1e}, max masked-out p = {worst_outside:.2e} over {bounded_cases} bounded cases, {elapsed:.2?}"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let data = tiny_dataset();
    let mut details = Vec::new();
    let mut pass = true;
    let variants = [
        (EncoderKind::MeanPool, TowerKind::MeanPool),
        (EncoderKind::BiRecurrent, TowerKind::BiRecurrent),
        (EncoderKind::DualTower, TowerKind::BiRecurrent),
        (EncoderKind::DualTower, TowerKind::MeanPool),
    ];
    let mut largest = 0;
    for (kind, tower) in variants {
        for masking in [true, false] {
            let net = tiny_network(tiny_config(kind, tower, masking), 5);
            let (n, failures, worst) = finite_difference_check(&net, &data);
            largest = largest.max(n);
            if failures > 0 || n > 5000 {
                pass = false;
                details.push(format!("{kind:?}/{tower:?} mask={masking}: {failures}/{n} bad (worst {worst:.1e})"));
            }
        }
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 60);
    if details.is_empty() {
        details.push(format!("8 networks, up to {largest} parameters, all agree"));
    }
    outcome(pass, format!("{}, {elapsed:.2?}", details.join("; ")))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut disagreements = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=80);
        let classes = rng.gen_range(1..=10u8);
        let gold: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        if !metrics_agree(&gold, &pred) {
            disagreements += 1;
        }
    }
    let rank = rank_metric(0.952, 0.928);
    let rendered = percent(rank);
    outcome(
        disagreements == 0 && rendered == "94.0",
        format!("{disagreements}/1000 disagreements; rank(95.2, 92.8) = {rendered}"),
    )
}

/// Train on 80% of the corpus (10% of that for early stopping), score the
/// stratified 20% hold-out.
fn holdout_run(products: &[Product], network: NetworkConfig, towers: usize, seed: u64) -> MetricsReport {
    let data = Dataset::from_products(products.to_vec(), Locale::Turkish).unwrap();
    let (primary, secondary) = embeddings_for(products, 32, seed).unwrap();
    let (rest, held) = train_val_split(&data, 0.8, seed).unwrap();
    let (train, val) = train_val_split(&rest, 0.9, seed).unwrap();
    let spec = ModelSpec {
        family: ModelFamily::Neural,
        linear: LinearConfig::default(),
        network,
        train: TrainConfig::default(),
        embeddings: [primary, secondary].into_iter().take(towers).map(Arc::new).collect(),
    };
    let (model, _) = spec.train_model(&train, &val, seed).unwrap();
    evaluate(&model, &held).unwrap()
}

fn mean_pool(masking: bool) -> NetworkConfig {
    NetworkConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::MeanPool,
            ..EncoderConfig::default()
        },
        masking,
        ..NetworkConfig::default()
    }
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig::default();
    let products = generate_products(&cfg).unwrap();
    let shape = (cfg.categories, cfg.categories * cfg.subcategories_per_category, products.len());
    let report = holdout_run(&products, mean_pool(true), 1, 1);
    let elapsed = start.elapsed();
    outcome(
        shape == (6, 18, 3600) && report.accuracy_sub >= 0.95 && within(elapsed, 300),
        format!(
            "{} hold-out titles, subcategory accuracy {:.4}, {elapsed:.2?}",
            report.count, report.accuracy_sub
        ),
    )
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn masking_ablation() -> Outcome {
    let products = generate_products(&SynthConfig::default()).unwrap();
    let masked: Vec<MetricsReport> = SEEDS.iter().map(|&s| holdout_run(&products, mean_pool(true), 1, s)).collect();
    let unmasked: Vec<MetricsReport> = SEEDS.iter().map(|&s| holdout_run(&products, mean_pool(false), 1, s)).collect();
    let rank_m = mean(masked.iter().map(|r| r.rank_metric));
    let rank_u = mean(unmasked.iter().map(|r| r.rank_metric));
    let cons_m: Vec<f64> = masked.iter().map(|r| r.hierarchy_consistency_rate).collect();
    let cons_u: Vec<f64> = unmasked.iter().map(|r| r.hierarchy_consistency_rate).collect();
    let pass = rank_m >= rank_u - 0.01 && cons_m.iter().all(|&c| c == 1.0) && cons_u.iter().any(|&c| c < 1.0);
    outcome(
        pass,
        format!(
            "rank masked {rank_m:.4} vs unmasked {rank_u:.4}; consistency masked min {:.4}, unmasked min {:.4}",
            cons_m.iter().copied().fold(1.0, f64::min),
            cons_u.iter().copied().fold(1.0, f64::min)
        ),
    )
}

fn bilingual_ablation() -> Outcome {
    let products = generate_products(&SynthConfig {
        bilingual: true,
        ..SynthConfig::default()
    })
    .unwrap();
    let swapped: Vec<Product> = products
        .iter()
        .map(|p| Product {
            title_primary: p.title_secondary.clone().unwrap(),
            title_secondary: Some(p.title_primary.clone()),
            ..p.clone()
        })
        .collect();
    let dual = NetworkConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::DualTower,
            tower: TowerKind::MeanPool,
            ..EncoderConfig::default()
        },
        ..NetworkConfig::default()
    };
    let rank_dual = mean(SEEDS.iter().map(|&s| holdout_run(&products, dual, 2, s).rank_metric));
    let rank_first = mean(SEEDS.iter().map(|&s| holdout_run(&products, mean_pool(true), 1, s).rank_metric));
    let rank_second = mean(SEEDS.iter().map(|&s| holdout_run(&swapped, mean_pool(true), 1, s).rank_metric));
    outcome(
        rank_dual - rank_first >= 0.02 && rank_dual - rank_second >= 0.02,
        format!("rank dual {rank_dual:.4}, first language {rank_first:.4}, second language {rank_second:.4}"),
    )
}

fn small_synthetic() -> Vec<Product> {
    generate_products(&SynthConfig {
        categories: 3,
        subcategories_per_category: 2,
        titles_per_subcategory: 25,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn linear_spec(products: &[Product]) -> ModelSpec {
    let table = random_embeddings(products.iter().map(|p| p.title_primary.as_str()), Locale::Turkish, 8, 5).unwrap();
    ModelSpec {
        family: ModelFamily::Linear,
        linear: LinearConfig {
            epochs: 5,
            ..LinearConfig::default()
        },
        network: NetworkConfig::default(),
        train: TrainConfig::default(),
        embeddings: vec![Arc::new(table)],
    }
}

fn report_bits(r: &MetricsReport) -> [u64; 6] {
    [r.accuracy_cat, r.accuracy_sub, r.waf1_cat, r.waf1_sub, r.rank_metric, r.hierarchy_consistency_rate]
        .map(f64::to_bits)
}

fn cross_platform_harness() -> Outcome {
    let (taxonomy, retailer) = retailer_fixture();
    let (kept, r) = filter_to_taxonomy(&retailer, &taxonomy);
    let ids: Vec<&str> = kept.iter().map(|p| p.id.as_str()).collect();
    let counts = [
        r.products_before,
        r.products_after,
        r.categories_before,
        r.categories_after,
        r.subcategories_before,
        r.subcategories_after,
    ];
    let counts_ok = ids == ["1", "2", "4", "7"] && counts == [7, 4, 3, 2, 5, 3];

    let products = small_synthetic();
    let data = Dataset::from_products(products.clone(), Locale::Turkish).unwrap();
    let fold = &stratified_kfold(&data, 5, 2).unwrap()[0];
    let train = data.subset(&fold.train);
    let held = data.subset(&fold.test);
    let spec = linear_spec(&products);
    let model = LinearPipeline::fit(&train, spec.embeddings[0].clone(), &spec.linear).unwrap();
    let direct = evaluate(&model, &held).unwrap();
    let rows = cross_platform_eval(&model, train.taxonomy(), &[("copy".into(), held.products().to_vec())]).unwrap();
    let identical = rows[0].report.as_ref().map(report_bits) == Some(report_bits(&direct));
    outcome(
        counts_ok && identical,
        format!("retention {counts:?}; held-out copy bitwise identical: {identical}"),
    )
}

/// Synthetic corpus with deliberately unequal class sizes.
fn uneven_corpus(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let products: Vec<Product> = small_synthetic()
        .into_iter()
        .filter(|_| rng.gen_bool(0.7))
        .collect();
    Dataset::from_products(products, Locale::Turkish).unwrap()
}

fn crossval_protocol() -> Outcome {
    let products = small_synthetic();
    let spec = linear_spec(&products);
    let data = Dataset::from_products(products.clone(), Locale::Turkish).unwrap();
    let first = run_crossval(&spec, &data, 5, 11).unwrap();
    let deterministic = first == run_crossval(&spec, &data, 5, 11).unwrap();
    let mut shuffled = products;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let reordered = run_crossval(&spec, &Dataset::from_products(shuffled, Locale::Turkish).unwrap(), 5, 11).unwrap();
    let order_free = first.folds.iter().zip(&reordered.folds).all(|(a, b)| report_bits(a) == report_bits(b));

    let mut worst_dev: f64 = 0.0;
    for seed in 0..20 {
        let d = uneven_corpus(seed);
        let s = d.taxonomy().num_subcategories();
        let mut totals = vec![0usize; s];
        d.golds().iter().for_each(|&(_, sub)| totals[sub] += 1);
        for fold in stratified_kfold(&d, 5, seed).unwrap() {
            let mut counts = vec![0usize; s];
            fold.test.iter().for_each(|&i| counts[d.gold(i).1] += 1);
            for (c, t) in counts.iter().zip(&totals) {
                worst_dev = worst_dev.max((*c as f64 - *t as f64 / 5.0).abs());
            }
        }
    }

    let row = [CrossValRow {
        model: "Linear".into(),
        embedding: "random-8".into(),
        report: &first,
    }];
    let golden = golden_matches("acceptance_crossval_table.txt", &render_crossval_table(&row))
        & golden_matches("acceptance_crossval_folds.txt", &render_fold_table(&first));
    outcome(
        deterministic && order_free && worst_dev <= 1.0 && golden,
        format!(
            "repeatable {deterministic}, row-order free {order_free}, worst class deviation {worst_dev:.2}, golden match {golden}"
        ),
    )
}

fn probe_titles(data: &Dataset, n: usize, seed: u64) -> Vec<Product> {
    let mut words: Vec<&str> = data.products().iter().flat_map(|p| p.title_primary.split(' ')).collect();
    words.extend(["bilinmeyen", "zzz", "42"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=6);
            let title: Vec<&str> = (0..k).map(|_| *words.choose(&mut rng).unwrap()).collect();
            Product::new(i.to_string(), title.join(" "), "x", "y")
        })
        .collect()
}

fn same_predictions(a: &Model, b: &Model, titles: &[Product]) -> bool {
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    titles.iter().all(|p| {
        let (x, y) = (a.predict(p).unwrap(), b.predict(p).unwrap());
        (x.category, x.subcategory) == (y.category, y.subcategory)
            && bits(&x.category_scores) == bits(&y.category_scores)
            && bits(&x.subcategory_scores) == bits(&y.subcategory_scores)
    })
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig {
        categories: 3,
        subcategories_per_category: 2,
        titles_per_subcategory: 25,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train, val) = train_val_split(&data, 0.9, 4).unwrap();
    let (primary, _) = embeddings_for(data.products(), 8, 4).unwrap();
    let titles = probe_titles(&data, 100, 9);
    let mut all_same = true;
    let mut rejected = 0;
    let mut attempts = 0;
    for family in [ModelFamily::Linear, ModelFamily::Neural] {
        let spec = ModelSpec {
            family,
            linear: LinearConfig::default(),
            network: NetworkConfig {
                encoder: EncoderConfig {
                    hidden_size: 8,
                    ..EncoderConfig::default()
                },
                dense_units: 8,
                ..NetworkConfig::default()
            },
            train: TrainConfig {
                max_epochs: 3,
                ..TrainConfig::default()
            },
            embeddings: vec![Arc::new(primary.clone())],
        };
        let (model, _) = spec.train_model(&train, &val, 4).unwrap();
        let container = ModelContainer {
            model,
            embedding_refs: Vec::new(),
            metadata: RunMetadata::default(),
        };
        let path = dir.path().join(format!("{family:?}.model"));
        save_model(&path, &container, true).unwrap();
        all_same &= same_predictions(&container.model, &load_model(&path).unwrap().model, &titles);

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.model");
        for at in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 5] {
            let mut corrupted = bytes.clone();
            corrupted[at] ^= 0x01;
            std::fs::write(&bad, &corrupted).unwrap();
            attempts += 1;
            if matches!(load_model(&bad), Err(Error::Integrity(_))) {
                rejected += 1;
            }
        }
    }
    outcome(
        all_same && rejected == attempts,
        format!("linear + neural round trips bit-identical on 100 titles: {all_same}; corrupted files rejected {rejected}/{attempts}"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "masked softmax normalization", masked_softmax_normalization),
        (2, "gradient correctness", gradient_correctness),
        (3, "metrics oracle", metrics_oracle),
        (4, "synthetic end-to-end", synthetic_end_to_end),
        (5, "masking ablation direction", masking_ablation),
        (6, "bilingual ablation direction", bilingual_ablation),
        (7, "cross-platform harness", cross_platform_harness),
        (8, "cross-validation protocol", crossval_protocol),
        (9, "persistence", persistence),
    ];
    // `cargo test -- <numbers>` restricts the run
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n}: {name} — {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
