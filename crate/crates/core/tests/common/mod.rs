#![allow(dead_code)]

use prodcat::corpus::{Dataset, Product};
use prodcat::features::{EmbeddingTable, Locale};
use prodcat::neural::{ClassifierNetwork, EncoderConfig, EncoderKind, NetworkConfig, TowerKind};
use prodcat::synth::random_embeddings;

/// Two categories, four subcategories, bilingual titles.
pub fn tiny_products() -> Vec<Product> {
    let rows = [
        ("bounty çikolata 57 gram", "coconut chocolate bar", "Snack", "Chocolate"),
        ("ülker çikolata gofret", "chocolate wafer", "Snack", "Chocolate"),
        ("eti cips acılı", "spicy chips", "Snack", "Chips"),
        ("lays cips klasik", "classic chips", "Snack", "Chips"),
        ("pınar süt 1 litre", "milk one litre", "Dairy", "Milk"),
        ("sütaş süt yarım yağlı", "semi skimmed milk", "Dairy", "Milk"),
        ("pınar peynir beyaz", "white cheese", "Dairy", "Cheese"),
        ("tahsildaroğlu peynir kaşar", "kashar cheese", "Dairy", "Cheese"),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (t, e, c, s))| Product::new((i + 1).to_string(), *t, *c, *s).with_secondary(*e))
        .collect()
}

pub fn tiny_dataset() -> Dataset {
    Dataset::from_products(tiny_products(), Locale::Turkish).unwrap()
}

pub fn tiny_tables(dim: usize, seed: u64) -> (EmbeddingTable, EmbeddingTable) {
    let p = tiny_products();
    let primary = random_embeddings(p.iter().map(|x| x.title_primary.as_str()), Locale::Turkish, dim, seed).unwrap();
    let secondary = random_embeddings(
        p.iter().filter_map(|x| x.title_secondary.as_deref()),
        Locale::Generic,
        dim,
        seed + 1,
    )
    .unwrap();
    (primary, secondary)
}

pub fn tiny_config(kind: EncoderKind, tower: TowerKind, masking: bool) -> NetworkConfig {
    NetworkConfig {
        encoder: EncoderConfig {
            kind,
            tower,
            hidden_size: 3,
            max_tokens: 32,
            fine_tune_embeddings: true,
        },
        dense_units: 5,
        masking,
        independent_heads: false,
    }
}

pub fn tiny_network(config: NetworkConfig, seed: u64) -> ClassifierNetwork {
    let data = tiny_dataset();
    let (p, s) = tiny_tables(4, 11);
    let tables: Vec<&EmbeddingTable> = [&p, &s].into_iter().take(config.encoder.towers()).collect();
    ClassifierNetwork::for_dataset(config, &data, &tables, seed).unwrap()
}

/// Largest violation of |analytic − numeric| ≤ max(1e-4·max(|a|,|n|), 1e-7)
/// over every parameter, using central differences with step 1e-5.
/// Returns (number of parameters, number of failures, worst relative error).
pub fn finite_difference_check(net: &ClassifierNetwork, data: &Dataset) -> (usize, usize, f64) {
    let batch: Vec<_> = data
        .products()
        .iter()
        .zip(data.golds())
        .map(|(p, &(c, s))| (p, c, s))
        .collect();
    let (_, grad) = net.compute_gradients(&batch).unwrap();
    let mut probe = net.clone();
    let h = 1e-5;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for (i, &analytic) in grad.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.compute_gradients(&batch).unwrap().0;
        probe.params_mut()[i] = orig - h;
        let down = probe.compute_gradients(&batch).unwrap().0;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if diff > 1e-7 {
            worst = worst.max(diff / scale);
        }
        if diff > (1e-4 * scale).max(1e-7) {
            failures += 1;
        }
    }
    (net.num_params(), failures, worst)
}

/// Count-based per-class scores: (label, precision, recall, f1, support),
/// plus accuracy and support-weighted F1. Shares no code with the library.
pub struct BruteMetrics {
    pub classes: Vec<(u8, f64, f64, f64, usize)>,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

pub fn brute_metrics(gold: &[u8], pred: &[u8]) -> BruteMetrics {
    let mut labels: Vec<u8> = gold.iter().chain(pred).copied().collect();
    labels.sort();
    labels.dedup();
    let n = gold.len();
    let mut classes = Vec::new();
    for &c in &labels {
        let mut tp = 0usize;
        let mut pred_c = 0usize;
        let mut gold_c = 0usize;
        for i in 0..n {
            if pred[i] == c {
                pred_c += 1;
            }
            if gold[i] == c {
                gold_c += 1;
                if pred[i] == c {
                    tp += 1;
                }
            }
        }
        let precision = if pred_c == 0 { 0.0 } else { tp as f64 / pred_c as f64 };
        let recall = if gold_c == 0 { 0.0 } else { tp as f64 / gold_c as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        classes.push((c, precision, recall, f1, gold_c));
    }
    let correct = (0..n).filter(|&i| gold[i] == pred[i]).count();
    let mut weighted = 0.0;
    for &(_, _, _, f1, support) in &classes {
        weighted += support as f64 * f1;
    }
    BruteMetrics {
        classes,
        accuracy: correct as f64 / n as f64,
        weighted_f1: weighted / n as f64,
    }
}

/// Does the library agree with [`brute_metrics`] exactly?
pub fn metrics_agree(gold: &[u8], pred: &[u8]) -> bool {
    let lib = prodcat::eval::classification_metrics(gold, pred).unwrap();
    let brute = brute_metrics(gold, pred);
    lib.accuracy == brute.accuracy
        && lib.weighted_f1 == brute.weighted_f1
        && lib.per_class.len() == brute.classes.len()
        && lib.per_class.iter().zip(&brute.classes).all(|(a, b)| {
            a.label == b.0 && a.precision == b.1 && a.recall == b.2 && a.f1 == b.3 && a.support == b.4
        })
}

/// Compares `actual` with `tests/golden/<name>`; set `PRODCAT_BLESS=1` to
/// rewrite the file instead.
pub fn check_golden(name: &str, actual: &str) {
    assert!(golden_matches(name, actual), "golden file {name} differs");
}

pub fn golden_matches(name: &str, actual: &str) -> bool {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("PRODCAT_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return true;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    if actual != expected {
        eprintln!("--- {name} expected\n{expected}\n--- actual\n{actual}");
    }
    actual == expected
}

/// Hand-built (category, subcategory) fixture where one retailer's catalog
/// partially overlaps the training taxonomy.
pub fn retailer_fixture() -> (prodcat::corpus::Taxonomy, Vec<Product>) {
    let train = [
        ("Snack", "Chocolate"),
        ("Snack", "Chips"),
        ("Dairy", "Milk"),
    ];
    let taxonomy = prodcat::corpus::Taxonomy::from_pairs(Locale::Turkish, train).unwrap();
    let rows = [
        ("bounty 57 gram", "Snack", "Chocolate"),
        ("lays klasik", "Snack", "Chips"),
        ("fıstık 200 g", "Snack", "Nuts"),
        ("pınar süt", "Dairy", "Milk"),
        ("sütlü çikolata", "Dairy", "Chocolate"),
        ("tam buğday ekmek", "Bakery", "Bread"),
        ("içim süt", "dairy", " Milk "),
    ];
    let products = rows
        .iter()
        .enumerate()
        .map(|(i, (t, c, s))| Product::new((i + 1).to_string(), *t, *c, *s))
        .collect();
    (taxonomy, products)
}
