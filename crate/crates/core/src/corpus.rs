//! Products, the two-level taxonomy, dataset loading, splitting and
//! descriptive statistics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{tokenize, Locale};

/// One catalog item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Product {
    pub id: String,
    pub title_primary: String,
    pub title_secondary: Option<String>,
    pub category: String,
    pub subcategory: String,
    pub source: String,
}

impl Product {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        category: impl Into<String>,
        subcategory: impl Into<String>,
    ) -> Self {
        Product {
            id: id.into(),
            title_primary: title.into(),
            title_secondary: None,
            category: category.into(),
            subcategory: subcategory.into(),
            source: String::new(),
        }
    }

    pub fn with_secondary(mut self, title: impl Into<String>) -> Self {
        self.title_secondary = Some(title.into());
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

/// Category labels, subcategory labels and the parent map between them.
///
/// Labels keep the spelling they were first seen with, but are matched by
/// their canonical key (trimmed, locale-lowercased) and indexed in key order.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    locale: Locale,
    categories: Vec<String>,
    subcategories: Vec<String>,
    parent: Vec<usize>,
    category_index: HashMap<String, usize>,
    subcategory_index: HashMap<String, usize>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.locale == other.locale
            && self.categories == other.categories
            && self.subcategories == other.subcategories
            && self.parent == other.parent
    }
}

impl Taxonomy {
    pub fn canonical(locale: Locale, label: &str) -> String {
        locale.lowercase(label.trim())
    }

    /// Builds a taxonomy from (category, subcategory) observations.
    pub fn from_pairs<'a>(
        locale: Locale,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut cats: BTreeMap<String, &str> = BTreeMap::new();
        let mut subs: BTreeMap<String, (&str, String, &str)> = BTreeMap::new();
        let mut conflicts = BTreeSet::new();
        for (cat, sub) in pairs {
            let ck = Self::canonical(locale, cat);
            let sk = Self::canonical(locale, sub);
            if ck.is_empty() || sk.is_empty() {
                return Err(Error::InvalidArgument("empty label".into()));
            }
            cats.entry(ck.clone()).or_insert(cat.trim());
            match subs.get(&sk) {
                Some((_, existing, first_cat)) if *existing != ck => {
                    conflicts.insert((
                        sub.trim().to_owned(),
                        first_cat.to_string(),
                        cat.trim().to_owned(),
                    ));
                }
                Some(_) => {}
                None => {
                    subs.insert(sk, (sub.trim(), ck, cat.trim()));
                }
            }
        }
        if !conflicts.is_empty() {
            return Err(Error::AmbiguousSubcategory {
                conflicts: conflicts.into_iter().collect(),
            });
        }
        if cats.is_empty() {
            return Err(Error::EmptyLabelSpace);
        }
        let category_index: HashMap<String, usize> =
            cats.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let categories = cats.values().map(|s| s.to_string()).collect();
        let mut subcategories = Vec::with_capacity(subs.len());
        let mut parent = Vec::with_capacity(subs.len());
        let mut subcategory_index = HashMap::with_capacity(subs.len());
        for (i, (key, (label, cat_key, _))) in subs.into_iter().enumerate() {
            subcategory_index.insert(key, i);
            subcategories.push(label.to_owned());
            parent.push(category_index[&cat_key]);
        }
        Ok(Taxonomy {
            locale,
            categories,
            subcategories,
            parent,
            category_index,
            subcategory_index,
        })
    }

    /// Reassembles a taxonomy from stored parts, validating every invariant.
    pub fn from_parts(
        locale: Locale,
        categories: Vec<String>,
        subcategories: Vec<String>,
        parent: Vec<usize>,
    ) -> Result<Self> {
        if subcategories.len() != parent.len() {
            return Err(Error::DimensionMismatch {
                expected: subcategories.len(),
                found: parent.len(),
            });
        }
        if let Some(&p) = parent.iter().find(|&&p| p >= categories.len()) {
            return Err(Error::InvalidArgument(format!("parent index {p} out of range")));
        }
        let rebuilt = Self::from_pairs(
            locale,
            subcategories
                .iter()
                .zip(&parent)
                .map(|(s, &p)| (categories[p].as_str(), s.as_str())),
        )?;
        if rebuilt.categories != categories || rebuilt.subcategories != subcategories {
            return Err(Error::InvalidArgument(
                "taxonomy labels are not distinct, sorted and all in use".into(),
            ));
        }
        Ok(rebuilt)
    }

    pub fn locale(&self) -> Locale {
        self.locale
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn subcategories(&self) -> &[String] {
        &self.subcategories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_subcategories(&self) -> usize {
        self.subcategories.len()
    }

    pub fn parent(&self, subcategory: usize) -> usize {
        self.parent[subcategory]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.category_index
            .get(&Self::canonical(self.locale, label))
            .copied()
    }

    pub fn subcategory_index(&self, label: &str) -> Option<usize> {
        self.subcategory_index
            .get(&Self::canonical(self.locale, label))
            .copied()
    }

    /// Resolves a product's labels, checking that they agree with the parent map.
    pub fn resolve(&self, product: &Product) -> Result<(usize, usize)> {
        let c = self
            .category_index(&product.category)
            .ok_or_else(|| Error::UnknownLabel {
                label: product.category.clone(),
            })?;
        let s = self
            .subcategory_index(&product.subcategory)
            .ok_or_else(|| Error::UnknownLabel {
                label: product.subcategory.clone(),
            })?;
        if self.parent[s] != c {
            return Err(Error::InvalidArgument(format!(
                "product {}: subcategory `{}` belongs to `{}`, not `{}`",
                product.id, product.subcategory, self.categories[self.parent[s]], product.category
            )));
        }
        Ok((c, s))
    }

    /// Writes `subcategory,category` rows sorted by subcategory.
    pub fn export<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subcategory", "category"])?;
        for (s, label) in self.subcategories.iter().enumerate() {
            w.write_record([label.as_str(), self.categories[self.parent[s]].as_str()])?;
        }
        w.flush().map_err(|e| Error::io("<taxonomy>", e))?;
        Ok(())
    }
}

/// Products together with the taxonomy they are labeled against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    products: Vec<Product>,
    taxonomy: Taxonomy,
    gold: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(products: Vec<Product>, taxonomy: Taxonomy) -> Result<Self> {
        let gold = products
            .iter()
            .map(|p| taxonomy.resolve(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            products,
            taxonomy,
            gold,
        })
    }

    /// Derives the taxonomy from the products' own labels.
    pub fn from_products(products: Vec<Product>, locale: Locale) -> Result<Self> {
        let taxonomy = build_taxonomy(&products, locale)?;
        Self::new(products, taxonomy)
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn locale(&self) -> Locale {
        self.taxonomy.locale
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Gold (category, subcategory) indices of product `i`.
    pub fn gold(&self, i: usize) -> (usize, usize) {
        self.gold[i]
    }

    pub fn golds(&self) -> &[(usize, usize)] {
        &self.gold
    }

    /// Products at `indices`, in the given order, sharing this taxonomy.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            products: indices.iter().map(|&i| self.products[i].clone()).collect(),
            taxonomy: self.taxonomy.clone(),
            gold: indices.iter().map(|&i| self.gold[i]).collect(),
        }
    }
}

/// Column mapping and parsing options for dataset files.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub title: String,
    pub title_secondary: Option<String>,
    pub category: String,
    pub subcategory: String,
    pub delimiter: u8,
    pub locale: Locale,
    /// Prefix each subcategory with its category so identical subcategory
    /// names under different parents become distinct labels.
    pub namespace_subcategories: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            title: "title".into(),
            title_secondary: None,
            category: "category".into(),
            subcategory: "subcategory".into(),
            delimiter: b',',
            locale: Locale::Turkish,
            namespace_subcategories: false,
        }
    }
}

pub fn namespaced_subcategory(category: &str, subcategory: &str) -> String {
    format!("{} > {}", category.trim(), subcategory.trim())
}

/// Parses every data row into a product without building a taxonomy.
///
/// Rows are validated fail-fast; the error carries the 1-based line number.
pub fn read_products<R: Read>(reader: R, schema: &Schema, source: &str) -> Result<Vec<Product>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_owned(),
            })
    };
    let title_col = column(&schema.title)?;
    let title2_col = schema.title_secondary.as_deref().map(column).transpose()?;
    let cat_col = column(&schema.category)?;
    let sub_col = column(&schema.subcategory)?;

    let mut products = Vec::new();
    for (ordinal, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(ordinal + 2);
        let cell = |idx: usize, what: &str| -> Result<String> {
            match record.get(idx).map(str::trim) {
                Some(v) if !v.is_empty() => Ok(v.to_owned()),
                _ => Err(Error::Row {
                    row,
                    reason: format!("empty or missing {what}"),
                }),
            }
        };
        let title_primary = cell(title_col, "title")?;
        let category = cell(cat_col, "category")?;
        let mut subcategory = cell(sub_col, "subcategory")?;
        if schema.namespace_subcategories {
            subcategory = namespaced_subcategory(&category, &subcategory);
        }
        let title_secondary = title2_col
            .and_then(|i| record.get(i))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_owned);
        products.push(Product {
            id: (ordinal + 1).to_string(),
            title_primary,
            title_secondary,
            category,
            subcategory,
            source: source.to_owned(),
        });
    }
    Ok(products)
}

pub fn load_products(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Product>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_products(file, schema, &source)
}

/// Loads a dataset file and derives its taxonomy from the observed labels.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    Dataset::from_products(load_products(path, schema)?, schema.locale)
}

pub fn build_taxonomy(products: &[Product], locale: Locale) -> Result<Taxonomy> {
    if products.is_empty() {
        return Err(Error::EmptyLabelSpace);
    }
    Taxonomy::from_pairs(
        locale,
        products
            .iter()
            .map(|p| (p.category.as_str(), p.subcategory.as_str())),
    )
}

/// Before/after counts of a taxonomy filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Retention {
    pub products_before: usize,
    pub products_after: usize,
    pub categories_before: usize,
    pub categories_after: usize,
    pub subcategories_before: usize,
    pub subcategories_after: usize,
}

/// Keeps the products whose category and subcategory both exist in
/// `reference` with a matching parent. The result is labeled against
/// `reference` restricted to the surviving labels.
pub fn filter_to_taxonomy(products: &[Product], reference: &Taxonomy) -> (Vec<Product>, Retention) {
    let locale = reference.locale();
    let distinct = |ps: &[Product], f: fn(&Product) -> &str| {
        ps.iter()
            .map(|p| Taxonomy::canonical(locale, f(p)))
            .collect::<BTreeSet<_>>()
            .len()
    };
    let kept: Vec<Product> = products
        .iter()
        .filter(|p| reference.resolve(p).is_ok())
        .cloned()
        .collect();
    let retention = Retention {
        products_before: products.len(),
        products_after: kept.len(),
        categories_before: distinct(products, |p| &p.category),
        categories_after: distinct(&kept, |p| &p.category),
        subcategories_before: distinct(products, |p| &p.subcategory),
        subcategories_after: distinct(&kept, |p| &p.subcategory),
    };
    (kept, retention)
}

/// Like [`filter_to_taxonomy`] but also returns the restricted taxonomy as a
/// dataset. `None` when nothing survives.
pub fn filter_dataset(products: &[Product], reference: &Taxonomy) -> (Option<Dataset>, Retention) {
    let (kept, retention) = filter_to_taxonomy(products, reference);
    if kept.is_empty() {
        return (None, retention);
    }
    let restricted = kept
        .iter()
        .map(|p| {
            let (c, s) = reference.resolve(p).expect("filtered products resolve");
            (
                reference.categories()[c].as_str(),
                reference.subcategories()[s].as_str(),
            )
        })
        .collect::<Vec<_>>();
    let taxonomy = Taxonomy::from_pairs(reference.locale(), restricted)
        .expect("restriction of a valid taxonomy is valid");
    let dataset = Dataset::new(kept, taxonomy).expect("filtered products resolve");
    (Some(dataset), retention)
}

fn id_order(a: &Product, b: &Product) -> Ordering {
    match (a.id.parse::<u64>(), b.id.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.id.cmp(&b.id),
    }
}

/// Members of each subcategory in canonical (id) order, then seeded-shuffled.
fn stratified_groups(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); dataset.taxonomy().num_subcategories()];
    for (i, &(_, s)) in dataset.golds().iter().enumerate() {
        groups[s].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut groups {
        g.sort_by(|&a, &b| id_order(&dataset.products()[a], &dataset.products()[b]));
        g.shuffle(&mut rng);
    }
    groups
}

fn sort_by_id(dataset: &Dataset, indices: &mut [usize]) {
    indices.sort_by(|&a, &b| id_order(&dataset.products()[a], &dataset.products()[b]));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold partition keyed on the subcategory.
///
/// Members of each class are dealt to folds round-robin, continuing from
/// where the previous class stopped, so both class counts and fold sizes
/// differ by at most one. Index lists are sorted by product id so fold
/// contents do not depend on row order.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut assignment = vec![0usize; dataset.len()];
    let mut next = 0usize;
    for group in stratified_groups(dataset, seed) {
        for i in group {
            assignment[i] = next;
            next = (next + 1) % k;
        }
    }
    let folds = (0..k)
        .map(|f| {
            let (mut test, mut train): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| assignment[i] == f);
            sort_by_id(dataset, &mut test);
            sort_by_id(dataset, &mut train);
            Fold { train, test }
        })
        .collect();
    Ok(folds)
}

/// Stratified two-way split with exactly `round(fraction * n)` training items.
///
/// Each class receives `floor(n_c * (1 - fraction))` validation items and the
/// remaining validation slots go to the classes with the largest fractional
/// remainders, so classes smaller than the validation share still contribute
/// to it in turn.
pub fn train_val_split_indices(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let n_val = n.saturating_sub(n_train);
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} on {n} items leaves an empty part"
        )));
    }
    let groups = stratified_groups(dataset, seed);
    let val_share = 1.0 - train_fraction;
    let mut quota: Vec<usize> = Vec::with_capacity(groups.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(groups.len());
    for (c, g) in groups.iter().enumerate() {
        let exact = g.len() as f64 * val_share;
        let base = exact.floor() as usize;
        quota.push(base);
        if base < g.len() {
            remainders.push((exact - base as f64, c));
        }
    }
    let mut missing = n_val.saturating_sub(quota.iter().sum());
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    for (g, q) in groups.iter().zip(&quota) {
        val.extend_from_slice(&g[..*q]);
        train.extend_from_slice(&g[*q..]);
    }
    sort_by_id(dataset, &mut train);
    sort_by_id(dataset, &mut val);
    Ok((train, val))
}

pub fn train_val_split(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (train, val) = train_val_split_indices(dataset, train_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub title_count: usize,
    pub mean_title_length: f64,
    /// Token counts at min, 25%, 50%, 75% and max (linear interpolation).
    pub length_quantiles: [f64; 5],
    pub ngram_counts: BTreeMap<Vec<String>, usize>,
    /// Title length in tokens, one entry per title, in dataset order.
    pub lengths: Vec<usize>,
}

impl CorpusStats {
    /// N-grams sorted by descending count, ties by n-gram.
    pub fn top_ngrams(&self, limit: usize) -> Vec<(&[String], usize)> {
        let mut v: Vec<_> = self
            .ngram_counts
            .iter()
            .map(|(k, &c)| (k.as_slice(), c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v.truncate(limit);
        v
    }
}

fn quantile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

pub fn corpus_stats(products: &[Product], locale: Locale, n: usize, min_count: usize) -> Result<CorpusStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
    }
    let mut lengths = Vec::with_capacity(products.len());
    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for p in products {
        let toks = tokenize(&p.title_primary, locale).into_tokens();
        lengths.push(toks.len());
        for w in toks.windows(n) {
            *counts.entry(w.to_vec()).or_default() += 1;
        }
    }
    counts.retain(|_, c| *c >= min_count);
    let mut sorted = lengths.clone();
    sorted.sort_unstable();
    let mean = if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
    };
    Ok(CorpusStats {
        title_count: products.len(),
        mean_title_length: mean,
        length_quantiles: [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&sorted, q)),
        ngram_counts: counts,
        lengths,
    })
}
