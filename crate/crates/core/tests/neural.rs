mod common;

use common::*;
use prodcat::corpus::{Dataset, Product};
use prodcat::eval::evaluate;
use prodcat::features::{EmbeddingTable, Locale};
use prodcat::neural::{
    build_mask, train_network, train_with_validator, ClassifierNetwork, EncoderKind, NetworkConfig, TowerKind,
    TrainConfig, MASK_SMOOTHING,
};
use prodcat::synth::random_embeddings;

fn variants() -> Vec<(EncoderKind, TowerKind)> {
    vec![
        (EncoderKind::MeanPool, TowerKind::MeanPool),
        (EncoderKind::BiRecurrent, TowerKind::BiRecurrent),
        (EncoderKind::DualTower, TowerKind::BiRecurrent),
        (EncoderKind::DualTower, TowerKind::MeanPool),
    ]
}

#[test]
fn gradients_match_finite_differences() {
    let data = tiny_dataset();
    for (kind, tower) in variants() {
        for masking in [true, false] {
            for independent in [false, true] {
                let mut config = tiny_config(kind, tower, masking);
                config.independent_heads = independent;
                let net = tiny_network(config, 5);
                assert!(net.num_params() <= 5000);
                let (n, failures, worst) = finite_difference_check(&net, &data);
                assert_eq!(
                    failures, 0,
                    "{kind:?}/{tower:?} masking={masking} independent={independent}: \
                     {failures}/{n} parameters off, worst relative error {worst:e}"
                );
            }
        }
    }
}

#[test]
fn masked_out_logits_get_exactly_zero_gradient() {
    let data = tiny_dataset();
    let net = tiny_network(tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true), 3);
    let taxonomy = data.taxonomy();
    let s = taxonomy.num_subcategories();
    for (p, &(c, sub)) in data.products().iter().zip(data.golds()) {
        let (_, grad) = net.compute_gradients(&[(p, c, sub)]).unwrap();
        // the subcategory bias is the last block, so its gradient is ∂loss/∂logit
        let logit_grad = &grad[grad.len() - s..];
        for (k, g) in logit_grad.iter().enumerate() {
            if taxonomy.parent(k) != c {
                assert_eq!(*g, 0.0, "subcategory {k} outside category {c}");
            } else {
                assert_ne!(*g, 0.0);
            }
        }
    }
}

#[test]
fn gradient_is_linear_in_the_loss() {
    // ∇(l_x + l_y) = 2·∇mean(l_x, l_y) = ∇l_x + ∇l_y
    let data = tiny_dataset();
    let net = tiny_network(tiny_config(EncoderKind::BiRecurrent, TowerKind::BiRecurrent, true), 9);
    let item = |i: usize| (&data.products()[i], data.gold(i).0, data.gold(i).1);
    let (lx, gx) = net.compute_gradients(&[item(0)]).unwrap();
    let (ly, gy) = net.compute_gradients(&[item(5)]).unwrap();
    let (lm, gm) = net.compute_gradients(&[item(0), item(5)]).unwrap();
    assert!((2.0 * lm - (lx + ly)).abs() < 1e-12);
    for ((a, b), m) in gx.iter().zip(&gy).zip(&gm) {
        assert!((2.0 * m - (a + b)).abs() <= 1e-12 * (1.0 + m.abs()));
    }
    let (_, g1) = net.compute_gradients(&[item(0)]).unwrap();
    let (_, g2) = net.compute_gradients(&[item(0), item(0)]).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
    }
}

#[test]
fn probabilities_normalize_and_masking_bounds_outsiders() {
    let data = tiny_dataset();
    for (kind, tower) in variants() {
        let net = tiny_network(tiny_config(kind, tower, true), 21);
        for p in data.products() {
            let pred = net.predict_hierarchical(p).unwrap();
            let sc: f64 = pred.category_scores.iter().sum();
            let ss: f64 = pred.subcategory_scores.iter().sum();
            assert!((sc - 1.0).abs() < 1e-9 && (ss - 1.0).abs() < 1e-9);
            assert!(pred.is_consistent(data.taxonomy()));
            for (k, prob) in pred.subcategory_scores.iter().enumerate() {
                if data.taxonomy().parent(k) != pred.category {
                    assert!(*prob < 1e-3);
                }
            }
        }
    }
}

#[test]
fn forward_rejects_foreign_mask() {
    let net = tiny_network(tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true), 1);
    let other = Dataset::from_products(
        vec![Product::new("1", "a", "X", "Y"), Product::new("2", "b", "X", "Z")],
        Locale::Turkish,
    )
    .unwrap();
    let p = &tiny_products()[0];
    assert!(net.forward_with_mask(p, &build_mask(other.taxonomy()), None).is_err());
    assert!(net.forward_with_mask(p, net.mask(), None).is_ok());
}

/// Straight-line evaluation of the mean-pool network's loss from the flat
/// parameter layout.
fn oracle_loss(net: &ClassifierNetwork, product: &Product, gold_c: usize, gold_s: usize) -> f64 {
    let theta = net.params();
    let tower = &net.towers()[0];
    let (v, d) = (tower.vocabulary.len(), tower.dim);
    let u = net.config().dense_units;
    let c = net.taxonomy().num_categories();
    let s = net.taxonomy().num_subcategories();
    let mut at = 0;
    let mut take = |n: usize| {
        let r = &theta[at..at + n];
        at += n;
        r
    };
    let emb = take(v * d);
    let dw = take(u * d);
    let db = take(u);
    let cw = take(c * u);
    let cb = take(c);
    let sw = take(s * u);
    let sb = take(s);

    let ids: Vec<usize> = prodcat::features::tokenize(&product.title_primary, tower.locale)
        .iter()
        .filter_map(|t| tower.vocabulary.index_of(t))
        .collect();
    let mut x = vec![0.0; d];
    for &i in &ids {
        for j in 0..d {
            x[j] += emb[i * d + j];
        }
    }
    for xj in &mut x {
        *xj /= ids.len() as f64;
    }
    let mut h = vec![0.0; u];
    for k in 0..u {
        let mut z = db[k];
        for j in 0..d {
            z += dw[k * d + j] * x[j];
        }
        h[k] = if z > 0.0 { z } else { 0.0 };
    }
    let logits = |w: &[f64], b: &[f64], n: usize| -> Vec<f64> {
        (0..n)
            .map(|k| b[k] + (0..u).map(|j| w[k * u + j] * h[j]).sum::<f64>())
            .collect()
    };
    let oc = logits(cw, cb, c);
    let os = logits(sw, sb, s);
    let mc = oc.iter().cloned().fold(f64::MIN, f64::max);
    let zc: f64 = oc.iter().map(|o| (o - mc).exp()).sum();
    let p_cat = (oc[gold_c] - mc).exp() / zc;
    let allowed: Vec<bool> = (0..s).map(|k| net.taxonomy().parent(k) == gold_c).collect();
    let ms = (0..s).filter(|&k| allowed[k]).map(|k| os[k]).fold(f64::MIN, f64::max);
    let num = |k: usize| if allowed[k] { (os[k] - ms).exp() } else { 0.0 } + (-8.0f64).exp();
    let zs: f64 = (0..s).map(num).sum();
    -(p_cat.ln()) - (num(gold_s) / zs).ln()
}

#[test]
fn loss_matches_straight_line_oracle() {
    let data = tiny_dataset();
    let net = tiny_network(tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true), 13);
    for (p, &(c, s)) in data.products().iter().zip(data.golds()) {
        let got = net.loss(p, c, s).unwrap();
        let want = oracle_loss(&net, p, c, s);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn uniform_heads_give_two_ln_two() {
    // C = 2, S = 2 (one child each); zeroing the head weights and biases
    // makes both heads uniform when masking is off
    let data = Dataset::from_products(
        vec![Product::new("1", "elma", "A", "a1"), Product::new("2", "armut", "B", "b1")],
        Locale::Turkish,
    )
    .unwrap();
    let table = random_embeddings(["elma armut"], Locale::Turkish, 3, 1).unwrap();
    let config = NetworkConfig {
        masking: false,
        ..tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, false)
    };
    let mut net = ClassifierNetwork::for_dataset(config, &data, &[&table], 0).unwrap();
    let heads = 2 * config.dense_units + 2 + 2 * config.dense_units + 2;
    let n = net.num_params();
    net.params_mut()[n - heads..].iter_mut().for_each(|v| *v = 0.0);
    let loss = net.loss(&data.products()[0], 0, 0).unwrap();
    assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn dual_tower_empty_secondary_contributes_zero_vector() {
    for tower in [TowerKind::BiRecurrent, TowerKind::MeanPool] {
        let net = tiny_network(tiny_config(EncoderKind::DualTower, tower, true), 4);
        let base = &tiny_products()[0];
        let mut none = base.clone();
        none.title_secondary = None;
        let mut empty = base.clone();
        empty.title_secondary = Some(String::new());
        let mut unknown = base.clone();
        unknown.title_secondary = Some("zzz qqq".into());

        let full = net.representation(base).unwrap();
        let primary_len = full.len() / 2;
        let r_none = net.representation(&none).unwrap();
        assert!(r_none[primary_len..].iter().all(|&v| v == 0.0));
        assert_eq!(r_none[..primary_len], full[..primary_len]);
        assert_eq!(net.representation(&empty).unwrap(), r_none);
        assert_eq!(net.representation(&unknown).unwrap(), r_none);
        assert_eq!(net.forward(&none, None).unwrap(), net.forward(&empty, None).unwrap());
    }
}

#[test]
fn forward_output_is_regression_locked() {
    let net = tiny_network(tiny_config(EncoderKind::BiRecurrent, TowerKind::BiRecurrent, true), 42);
    let (cat, sub) = net.forward(&tiny_products()[2], None).unwrap();
    let golden_cat = [0.5010711409164699, 0.4989288590835302];
    let golden_sub = [0.49928315865593276, 0.0001678029126142201, 0.0001678029126142201, 0.5003812355188387];
    for (a, b) in cat.iter().zip(golden_cat) {
        assert!((a - b).abs() < 1e-12, "{cat:?}");
    }
    for (a, b) in sub.iter().zip(golden_sub) {
        assert!((a - b).abs() < 1e-12, "{sub:?}");
    }
    // the two subcategories outside the predicted category share the smoothing mass
    assert_eq!(sub[1], sub[2]);
    assert!(sub[1] < MASK_SMOOTHING);
}

fn keyword_fixture() -> (Dataset, EmbeddingTable) {
    // one distinctive keyword per subcategory, two products each
    let rows = [
        ("kakao bar", "Snack", "Chocolate"),
        ("kakao kutu", "Snack", "Chocolate"),
        ("mısır paket", "Snack", "Chips"),
        ("mısır kutu", "Snack", "Chips"),
        ("inek paket", "Dairy", "Milk"),
        ("inek bar", "Dairy", "Milk"),
        ("kaşar kutu", "Dairy", "Cheese"),
        ("kaşar paket", "Dairy", "Cheese"),
    ];
    let products: Vec<Product> = rows
        .iter()
        .enumerate()
        .map(|(i, (t, c, s))| Product::new((i + 1).to_string(), *t, *c, *s))
        .collect();
    let table = random_embeddings(rows.iter().map(|r| r.0), Locale::Turkish, 6, 3).unwrap();
    (Dataset::from_products(products, Locale::Turkish).unwrap(), table)
}

#[test]
fn keyword_fixture_is_separable_by_nearest_keyword() {
    let (data, _) = keyword_fixture();
    let keywords = ["kakao", "mısır", "inek", "kaşar"];
    for p in data.products() {
        let hits: Vec<_> = keywords.iter().filter(|k| p.title_primary.contains(*k)).collect();
        assert_eq!(hits.len(), 1);
        let owner = data
            .products()
            .iter()
            .filter(|q| q.title_primary.contains(hits[0]))
            .map(|q| &q.subcategory)
            .collect::<std::collections::BTreeSet<_>>();
        assert_eq!(owner.len(), 1);
    }
}

#[test]
fn mean_pool_fits_keyword_fixture() {
    let (data, table) = keyword_fixture();
    let config = NetworkConfig {
        dense_units: 16,
        ..tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true)
    };
    let mut net = ClassifierNetwork::for_dataset(config, &data, &[&table], 7).unwrap();
    let train = TrainConfig {
        learning_rate: 0.01,
        batch_size: 4,
        max_epochs: 200,
        patience: 200,
        seed: 7,
    };
    let log = train_network(&mut net, &data, &data, &train).unwrap();
    let report = evaluate(&net, &data).unwrap();
    assert_eq!(report.accuracy_cat, 1.0);
    assert_eq!(report.accuracy_sub, 1.0);
    assert!(log.epochs.len() <= 200);
}

#[test]
fn patience_halts_and_restores_first_epoch() {
    let data = tiny_dataset();
    let mut net = tiny_network(tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true), 2);
    let config = TrainConfig {
        patience: 10,
        max_epochs: 100,
        ..TrainConfig::default()
    };
    let mut calls = 0;
    let mut after_first: Vec<f64> = Vec::new();
    let log = train_with_validator(&mut net, &data, &config, |n| {
        calls += 1;
        if calls == 1 {
            after_first = n.params().to_vec();
        }
        Ok(1.0 - 0.01 * calls as f64)
    })
    .unwrap();
    assert_eq!(log.epochs.len(), 11);
    assert_eq!(log.best_epoch, 1);
    assert!(log.stopped_early);
    assert_eq!(net.params(), &after_first[..]);
}

#[test]
fn nan_metric_aborts() {
    let data = tiny_dataset();
    let mut net = tiny_network(tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true), 2);
    let err = train_with_validator(&mut net, &data, &TrainConfig::default(), |_| Ok(f64::NAN)).unwrap_err();
    assert!(matches!(err, prodcat::Error::NanMetric { epoch: 1, .. }));
}

#[test]
fn training_is_deterministic() {
    let data = tiny_dataset();
    let config = TrainConfig {
        max_epochs: 5,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = tiny_network(tiny_config(EncoderKind::DualTower, TowerKind::BiRecurrent, true), 17);
        let log = train_network(&mut net, &data, &data, &config).unwrap();
        let rows: Vec<(usize, f64, f64)> = log
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.validation_metric))
            .collect();
        (rows, log.best_epoch, net.params().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_embeddings_do_not_move() {
    let data = tiny_dataset();
    let mut config = tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true);
    config.encoder.fine_tune_embeddings = false;
    let mut net = tiny_network(config, 8);
    let before = net.params().to_vec();
    let emb = net.towers()[0].vocabulary.len() * net.towers()[0].dim;
    train_with_validator(
        &mut net,
        &data,
        &TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        },
        |_| Ok(0.5),
    )
    .unwrap();
    // a constant metric keeps epoch-1 weights; embeddings must match the start
    assert_eq!(net.params()[..emb], before[..emb]);
    assert_ne!(net.params()[emb..], before[emb..]);
}

#[test]
fn construction_errors() {
    let data = tiny_dataset();
    let (p, _) = tiny_tables(4, 1);
    let dual = tiny_config(EncoderKind::DualTower, TowerKind::BiRecurrent, true);
    assert!(ClassifierNetwork::for_dataset(dual, &data, &[&p], 0).is_err());
    let mut zero = tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true);
    zero.dense_units = 0;
    assert!(ClassifierNetwork::for_dataset(zero, &data, &[&p], 0).is_err());
    let net = tiny_network(tiny_config(EncoderKind::MeanPool, TowerKind::MeanPool, true), 0);
    assert!(net.loss(&data.products()[0], 5, 0).is_err());
    assert!(net.compute_gradients(&[]).is_err());
}
