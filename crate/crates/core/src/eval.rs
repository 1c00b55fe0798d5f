//! Accuracy / precision / recall / F1, the weighted-F1 ranking metric,
//! cross-validation, cross-retailer evaluation and the misprediction audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::{filter_dataset, stratified_kfold, train_val_split, Dataset, Product, Retention, Taxonomy};
use crate::error::{Error, Result};
use crate::model::{HierarchicalClassifier, Prediction, Trainer};

/// Per-class confusion counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionStats<L> {
    pub labels: Vec<L>,
    pub true_positives: Vec<usize>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
    pub support: Vec<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores<L> {
    pub label: L,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics<L> {
    pub per_class: Vec<ClassScores<L>>,
    pub accuracy: f64,
    /// Support-weighted mean of the per-class F1 scores.
    pub weighted_f1: f64,
    pub confusion: ConfusionStats<L>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Classes are the sorted union of gold and predicted labels. Undefined
/// ratios (zero denominators) are reported as 0.
pub fn classification_metrics<L: Ord + Clone>(gold: &[L], predicted: &[L]) -> Result<ClassificationMetrics<L>> {
    if gold.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            found: predicted.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let mut index: BTreeMap<&L, usize> = gold.iter().chain(predicted).map(|l| (l, 0)).collect();
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let k = index.len();
    let mut tp = vec![0; k];
    let mut fp = vec![0; k];
    let mut fneg = vec![0; k];
    let mut support = vec![0; k];
    let mut correct = 0;
    for (g, p) in gold.iter().zip(predicted) {
        let gi = index[g];
        support[gi] += 1;
        if g == p {
            tp[gi] += 1;
            correct += 1;
        } else {
            fp[index[p]] += 1;
            fneg[gi] += 1;
        }
    }
    let labels: Vec<L> = index.keys().map(|l| (*l).clone()).collect();
    let per_class: Vec<ClassScores<L>> = (0..k)
        .map(|i| {
            let precision = ratio(tp[i], tp[i] + fp[i]);
            let recall = ratio(tp[i], tp[i] + fneg[i]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                label: labels[i].clone(),
                precision,
                recall,
                f1,
                support: support[i],
            }
        })
        .collect();
    let weighted_f1 = per_class.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / gold.len() as f64;
    Ok(ClassificationMetrics {
        per_class,
        accuracy: correct as f64 / gold.len() as f64,
        weighted_f1,
        confusion: ConfusionStats {
            labels,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
            support,
            total: gold.len(),
        },
    })
}

/// Mean of the category-level and subcategory-level weighted F1.
pub fn rank_metric(waf1_cat: f64, waf1_sub: f64) -> f64 {
    (waf1_cat + waf1_sub) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub count: usize,
    pub accuracy_cat: f64,
    pub accuracy_sub: f64,
    pub per_class_cat: Vec<ClassScores<String>>,
    pub per_class_sub: Vec<ClassScores<String>>,
    pub waf1_cat: f64,
    pub waf1_sub: f64,
    pub rank_metric: f64,
    /// Fraction of predictions whose subcategory belongs to the predicted category.
    pub hierarchy_consistency_rate: f64,
}

impl MetricsReport {
    /// Scores (category, subcategory) label pairs.
    pub fn from_labels(gold: &[(String, String)], predicted: &[(String, String)], consistency: f64) -> Result<Self> {
        let split = |v: &[(String, String)]| -> (Vec<String>, Vec<String>) { v.iter().cloned().unzip() };
        let (gc, gs) = split(gold);
        let (pc, ps) = split(predicted);
        let cat = classification_metrics(&gc, &pc)?;
        let sub = classification_metrics(&gs, &ps)?;
        Ok(MetricsReport {
            count: gold.len(),
            accuracy_cat: cat.accuracy,
            accuracy_sub: sub.accuracy,
            waf1_cat: cat.weighted_f1,
            waf1_sub: sub.weighted_f1,
            rank_metric: rank_metric(cat.weighted_f1, sub.weighted_f1),
            per_class_cat: cat.per_class,
            per_class_sub: sub.per_class,
            hierarchy_consistency_rate: consistency,
        })
    }

    /// Scores predictions against gold indices of the same taxonomy.
    pub fn from_indices(taxonomy: &Taxonomy, gold: &[(usize, usize)], predictions: &[Prediction]) -> Result<Self> {
        let label = |(c, s): (usize, usize)| {
            (
                taxonomy.categories()[c].clone(),
                taxonomy.subcategories()[s].clone(),
            )
        };
        let g: Vec<_> = gold.iter().map(|&p| label(p)).collect();
        let p: Vec<_> = predictions.iter().map(|p| label((p.category, p.subcategory))).collect();
        Self::from_labels(&g, &p, consistency_rate(taxonomy, predictions))
    }
}

pub fn consistency_rate(taxonomy: &Taxonomy, predictions: &[Prediction]) -> f64 {
    ratio(
        predictions.iter().filter(|p| p.is_consistent(taxonomy)).count(),
        predictions.len(),
    )
}

fn predicted_labels(model: &dyn HierarchicalClassifier, p: &Prediction) -> (String, String) {
    let t = model.taxonomy();
    (
        t.categories()[p.category].clone(),
        t.subcategories()[p.subcategory].clone(),
    )
}

/// Runs `model` over `dataset` and scores it. Gold labels are taken from the
/// dataset's own taxonomy, which may be a restriction of the model's.
pub fn evaluate(model: &dyn HierarchicalClassifier, dataset: &Dataset) -> Result<MetricsReport> {
    let predictions = dataset
        .products()
        .iter()
        .map(|p| model.predict(p))
        .collect::<Result<Vec<_>>>()?;
    let t = dataset.taxonomy();
    let gold: Vec<_> = dataset
        .golds()
        .iter()
        .map(|&(c, s)| (t.categories()[c].clone(), t.subcategories()[s].clone()))
        .collect();
    let pred: Vec<_> = predictions.iter().map(|p| predicted_labels(model, p)).collect();
    MetricsReport::from_labels(&gold, &pred, consistency_rate(model.taxonomy(), &predictions))
}

/// Mean and sample (n − 1) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }

    /// Percent cell `mm.m ± s.s`.
    pub fn percent_cell(&self) -> String {
        format!("{} ± {}", percent(self.mean), percent(self.std))
    }
}

/// A ratio as a percentage with one decimal, e.g. 0.5 -> `50.0`.
pub fn percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValReport {
    pub folds: Vec<MetricsReport>,
    pub accuracy_cat: Summary,
    pub accuracy_sub: Summary,
    pub waf1_cat: Summary,
    pub waf1_sub: Summary,
    pub rank_metric: Summary,
    pub consistency: Summary,
}

impl CrossValReport {
    pub fn from_folds(folds: Vec<MetricsReport>) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
        CrossValReport {
            accuracy_cat: col(|r| r.accuracy_cat),
            accuracy_sub: col(|r| r.accuracy_sub),
            waf1_cat: col(|r| r.waf1_cat),
            waf1_sub: col(|r| r.waf1_sub),
            rank_metric: col(|r| r.rank_metric),
            consistency: col(|r| r.hierarchy_consistency_rate),
            folds,
        }
    }
}

/// Seed for fold `fold` derived from the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of each training part held out for early stopping.
pub const CROSSVAL_TRAIN_FRACTION: f64 = 0.9;

/// Stratified k-fold evaluation. Each fold's training part is split 90/10
/// into train and validation before fitting; folds run in parallel.
pub fn run_crossval(trainer: &dyn Trainer, dataset: &Dataset, k: usize, seed: u64) -> Result<CrossValReport> {
    let folds = stratified_kfold(dataset, k, seed)?;
    let reports = folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| {
            let run = || -> Result<MetricsReport> {
                let s = fold_seed(seed, i);
                let rest = dataset.subset(&fold.train);
                let (train, val) = train_val_split(&rest, CROSSVAL_TRAIN_FRACTION, s)?;
                let model = trainer.fit(&train, &val, s)?;
                evaluate(model.as_ref(), &dataset.subset(&fold.test))
            };
            run().map_err(|e| Error::Fold {
                fold: i + 1,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossValReport::from_folds(reports))
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

fn csv_rows(rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 input")
}

/// Labeled cross-validation result row.
pub struct CrossValRow<'a> {
    pub model: String,
    pub embedding: String,
    pub report: &'a CrossValReport,
}

fn crossval_cells(rows: &[CrossValRow]) -> Vec<Vec<String>> {
    let mut cells = vec![vec![
        "Model".to_string(),
        "Embedding".into(),
        "Acc Cat (%)".into(),
        "Acc Sub (%)".into(),
        "WAF1 Cat (%)".into(),
        "WAF1 Sub (%)".into(),
        "Avg".into(),
    ]];
    for r in rows {
        cells.push(vec![
            r.model.clone(),
            r.embedding.clone(),
            r.report.accuracy_cat.percent_cell(),
            r.report.accuracy_sub.percent_cell(),
            r.report.waf1_cat.percent_cell(),
            r.report.waf1_sub.percent_cell(),
            percent(rank_metric(r.report.waf1_cat.mean, r.report.waf1_sub.mean)),
        ]);
    }
    cells
}

pub fn render_crossval_table(rows: &[CrossValRow]) -> String {
    aligned(&crossval_cells(rows))
}

pub fn crossval_csv(rows: &[CrossValRow]) -> String {
    csv_rows(&crossval_cells(rows))
}

/// Per-fold detail rows.
pub fn render_fold_table(report: &CrossValReport) -> String {
    let mut cells = vec![vec![
        "Fold".to_string(),
        "N".into(),
        "Acc Cat".into(),
        "Acc Sub".into(),
        "WAF1 Cat".into(),
        "WAF1 Sub".into(),
        "Avg".into(),
        "Consistency".into(),
    ]];
    for (i, f) in report.folds.iter().enumerate() {
        cells.push(vec![
            (i + 1).to_string(),
            f.count.to_string(),
            percent(f.accuracy_cat),
            percent(f.accuracy_sub),
            percent(f.waf1_cat),
            percent(f.waf1_sub),
            percent(f.rank_metric),
            percent(f.hierarchy_consistency_rate),
        ]);
    }
    aligned(&cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformRow {
    pub name: String,
    pub retention: Retention,
    /// `None` when no product survives the taxonomy filter.
    pub report: Option<MetricsReport>,
}

/// Filters each external catalog to the training taxonomy and evaluates on
/// primary-language titles only.
pub fn cross_platform_eval(
    model: &dyn HierarchicalClassifier,
    training_taxonomy: &Taxonomy,
    external: &[(String, Vec<Product>)],
) -> Result<Vec<PlatformRow>> {
    external
        .iter()
        .map(|(name, products)| {
            let primary_only: Vec<Product> = products
                .iter()
                .map(|p| Product {
                    title_secondary: None,
                    ..p.clone()
                })
                .collect();
            let (dataset, retention) = filter_dataset(&primary_only, training_taxonomy);
            let report = dataset.map(|d| evaluate(model, &d)).transpose()?;
            Ok(PlatformRow {
                name: name.clone(),
                retention,
                report,
            })
        })
        .collect()
}

fn platform_cells(rows: &[PlatformRow]) -> Vec<Vec<String>> {
    let mut cells = vec![vec![
        "Dataset".to_string(),
        "Products".into(),
        "Categories".into(),
        "Subcategories".into(),
        "WAF1 Cat (%)".into(),
        "WAF1 Sub (%)".into(),
        "Average".into(),
    ]];
    for r in rows {
        let t = &r.retention;
        let (c, s, a) = match &r.report {
            Some(m) => (percent(m.waf1_cat), percent(m.waf1_sub), percent(m.rank_metric)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        cells.push(vec![
            r.name.clone(),
            format!("{} -> {}", t.products_before, t.products_after),
            format!("{} -> {}", t.categories_before, t.categories_after),
            format!("{} -> {}", t.subcategories_before, t.subcategories_after),
            c,
            s,
            a,
        ]);
    }
    cells
}

pub fn render_platform_table(rows: &[PlatformRow]) -> String {
    aligned(&platform_cells(rows))
}

pub fn platform_csv(rows: &[PlatformRow]) -> String {
    csv_rows(&platform_cells(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub id: String,
    pub title: String,
    pub gold: (String, String),
    pub predicted: (String, String),
    pub confidence: f64,
}

/// Mispredicted products, most confident first (ties keep dataset order).
pub fn misprediction_report(
    model: &dyn HierarchicalClassifier,
    dataset: &Dataset,
    limit: usize,
) -> Result<Vec<AuditEntry>> {
    let locale = model.taxonomy().locale();
    let same = |a: &str, b: &str| Taxonomy::canonical(locale, a) == Taxonomy::canonical(locale, b);
    let mut entries = Vec::new();
    for product in dataset.products() {
        let p = model.predict(product)?;
        let (pc, ps) = predicted_labels(model, &p);
        if same(&pc, &product.category) && same(&ps, &product.subcategory) {
            continue;
        }
        entries.push(AuditEntry {
            id: product.id.clone(),
            title: product.title_primary.clone(),
            gold: (product.category.clone(), product.subcategory.clone()),
            predicted: (pc, ps),
            confidence: p.subcategory_confidence(),
        });
    }
    entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    entries.truncate(limit);
    Ok(entries)
}

fn audit_cells(entries: &[AuditEntry]) -> Vec<Vec<String>> {
    let mut cells = vec![["id", "title", "gold_cat", "gold_sub", "pred_cat", "pred_sub", "confidence"]
        .map(String::from)
        .to_vec()];
    for e in entries {
        cells.push(vec![
            e.id.clone(),
            e.title.clone(),
            e.gold.0.clone(),
            e.gold.1.clone(),
            e.predicted.0.clone(),
            e.predicted.1.clone(),
            format!("{:.4}", e.confidence),
        ]);
    }
    cells
}

pub fn audit_csv(entries: &[AuditEntry]) -> String {
    csv_rows(&audit_cells(entries))
}

pub fn render_audit_table(entries: &[AuditEntry]) -> String {
    aligned(&audit_cells(entries))
}

/// One-line summary of a report.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "n={} acc_cat={} acc_sub={} waf1_cat={} waf1_sub={} avg={} consistency={}",
        report.count,
        percent(report.accuracy_cat),
        percent(report.accuracy_sub),
        percent(report.waf1_cat),
        percent(report.waf1_sub),
        percent(report.rank_metric),
        percent(report.hierarchy_consistency_rate),
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn perfect_predictions() {
        let g = [1, 2, 2, 3];
        let m = classification_metrics(&g, &g).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.weighted_f1, 1.0);
        assert!(m.per_class.iter().all(|c| c.f1 == 1.0));
    }

    #[test]
    fn harmonic_mean_case() {
        // class 0: tp 1, fn 1, fp 0 -> precision 1, recall 0.5
        let m = classification_metrics(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(m.per_class[0].precision, 1.0);
        assert_eq!(m.per_class[0].recall, 0.5);
        assert_relative_eq!(m.per_class[0].f1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn weighted_average_case() {
        // supports {3, 1}: class "a" perfect, class "b" never right
        let gold = ["a", "a", "a", "b"];
        let pred = ["a", "a", "a", "c"];
        let m = classification_metrics(&gold, &pred).unwrap();
        let f1: Vec<f64> = m.per_class.iter().map(|c| c.f1).collect();
        assert_eq!(f1, vec![1.0, 0.0, 0.0]);
        assert_eq!(m.weighted_f1, 0.75);
        assert_eq!(m.per_class[2].support, 0);
    }

    #[test]
    fn length_mismatch() {
        assert!(classification_metrics(&[1, 2], &[1]).is_err());
        assert!(classification_metrics::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn rank_metric_examples() {
        assert_relative_eq!(rank_metric(0.952, 0.928), 0.94, epsilon = 1e-12);
        assert_eq!(percent(rank_metric(0.952, 0.928)), "94.0");
        assert_eq!(rank_metric(0.3, 0.3), 0.3);
        assert_eq!(rank_metric(1.0, 0.0), 0.5);
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[0.5, 0.7]);
        assert_relative_eq!(s.mean, 0.6, epsilon = 1e-15);
        assert_relative_eq!(s.std, 0.2f64.hypot(0.0) / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(Summary::of(&[0.5, 0.5]).percent_cell(), "50.0 ± 0.0");
        assert_eq!(percent(0.5), "50.0");
    }

    #[test]
    fn fold_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..10).map(|f| fold_seed(42, f)).collect();
        assert_eq!(seeds.len(), 10);
    }
}
