use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use prodcat::config::RunConfig;
use prodcat::container::{load_model, save_model, EmbeddingRef, ModelContainer, RunMetadata};
use prodcat::corpus::{corpus_stats, load_products, train_val_split, Dataset, Product};
use prodcat::eval::{
    audit_csv, cross_platform_eval, crossval_csv, evaluate, misprediction_report, platform_csv, render_audit_table,
    render_crossval_table, render_fold_table, render_platform_table, render_report, run_crossval, CrossValRow,
    MetricsReport,
};
use prodcat::features::load_embeddings;
use prodcat::model::{HierarchicalClassifier, ModelFamily, ModelSpec};
use prodcat::neural::EncoderKind;
use prodcat::synth::{embeddings_for, generate_products, write_products, SynthConfig};
use prodcat::{Error, Result};

fn config_error(key: &str, reason: &str) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn data_paths(cfg: &RunConfig) -> Result<&[PathBuf]> {
    if cfg.data.is_empty() {
        return Err(config_error("data", "at least one dataset file is required"));
    }
    Ok(&cfg.data)
}

/// All dataset files concatenated; ids are prefixed with the file stem when
/// there is more than one file so they stay unique.
fn load_all(cfg: &RunConfig) -> Result<Vec<Product>> {
    let paths = data_paths(cfg)?;
    let mut all = Vec::new();
    for path in paths {
        let products = load_products(path, &cfg.schema)?;
        if paths.len() == 1 {
            return Ok(products);
        }
        all.extend(products.into_iter().map(|p| Product {
            id: format!("{}:{}", p.source, p.id),
            ..p
        }));
    }
    Ok(all)
}

fn out_dir(cfg: &RunConfig) -> Result<Option<&Path>> {
    let Some(dir) = cfg.out.as_deref() else { return Ok(None) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(Some(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn model_spec(cfg: &RunConfig) -> Result<(ModelSpec, Vec<EmbeddingRef>)> {
    let primary = cfg
        .embeddings_primary
        .as_ref()
        .ok_or_else(|| config_error("embeddings_primary", "an embedding file is required"))?;
    let mut paths = vec![primary];
    if cfg.family == ModelFamily::Neural && cfg.encoder.kind == EncoderKind::DualTower {
        paths.extend(cfg.embeddings_secondary.as_ref());
    }
    let mut tables = Vec::new();
    let mut refs = Vec::new();
    for p in paths {
        tables.push(Arc::new(load_embeddings(p)?));
        refs.push(EmbeddingRef::for_file(p)?);
    }
    let spec = ModelSpec {
        family: cfg.family,
        linear: cfg.linear,
        network: cfg.network(),
        train: cfg.train,
        embeddings: tables,
    };
    Ok((spec, refs))
}

fn model_label(cfg: &RunConfig) -> String {
    match cfg.family {
        ModelFamily::Linear => "linear".into(),
        ModelFamily::Neural => {
            let encoder = match cfg.encoder.kind {
                EncoderKind::MeanPool => "mean_pool",
                EncoderKind::BiRecurrent => "bi_recurrent",
                EncoderKind::DualTower => "dual_tower",
            };
            let mask = if cfg.masking { "masked" } else { "unmasked" };
            format!("{encoder} ({mask})")
        }
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn stats(cfg: &RunConfig, n: usize, min_count: usize, top: usize, histogram: Option<&Path>) -> Result<()> {
    let products = load_all(cfg)?;
    let s = corpus_stats(&products, cfg.schema.locale, n, min_count)?;
    let q = s.length_quantiles;
    println!("titles: {}", s.title_count);
    println!("mean length: {:.2} tokens", s.mean_title_length);
    println!(
        "length min/25%/50%/75%/max: {:.1} / {:.1} / {:.1} / {:.1} / {:.1}",
        q[0], q[1], q[2], q[3], q[4]
    );
    println!("{n}-grams with count >= {min_count}: {}", s.ngram_counts.len());
    for (gram, count) in s.top_ngrams(top) {
        println!("{count:>8}  {}", gram.join(" "));
    }
    if let Some(path) = histogram {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        s.lengths.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
        let mut text = String::from("length,count\n");
        counts.iter().for_each(|(l, c)| text.push_str(&format!("{l},{c}\n")));
        write_file(path, &text)?;
    }
    Ok(())
}

fn metrics_map(r: &MetricsReport) -> BTreeMap<String, f64> {
    [
        ("accuracy_cat", r.accuracy_cat),
        ("accuracy_sub", r.accuracy_sub),
        ("waf1_cat", r.waf1_cat),
        ("waf1_sub", r.waf1_sub),
        ("rank_metric", r.rank_metric),
        ("hierarchy_consistency_rate", r.hierarchy_consistency_rate),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    if cfg.out.is_none() {
        return Err(config_error("out", "train needs an output directory"));
    }
    let (spec, refs) = model_spec(cfg)?;
    let dataset = Dataset::from_products(load_all(cfg)?, cfg.schema.locale)?;
    let (train, val) = train_val_split(&dataset, cfg.train_fraction, cfg.seed)?;
    let (model, log) = spec.train_model(&train, &val, cfg.seed)?;
    let report = evaluate(&model, &val)?;
    println!("validation: {}", render_report(&report));

    let dir = out_dir(cfg)?.expect("checked above");
    if let Some(log) = &log {
        write_file(&dir.join("train_log.csv"), &log.to_csv())?;
    }
    let taxonomy_path = dir.join("taxonomy.csv");
    let file = File::create(&taxonomy_path).map_err(|e| Error::io(&taxonomy_path, e))?;
    model.taxonomy().export(file)?;
    let container = ModelContainer {
        model,
        embedding_refs: refs,
        metadata: RunMetadata {
            seed: cfg.seed,
            config: cfg.to_map(),
            metrics: metrics_map(&report),
        },
    };
    let path = dir.join("model.prodcat");
    save_model(&path, &container, cfg.inline_embeddings)?;
    println!("saved {}", path.display());
    Ok(())
}

pub fn crossval(cfg: &RunConfig) -> Result<()> {
    let (spec, _) = model_spec(cfg)?;
    let dataset = Dataset::from_products(load_all(cfg)?, cfg.schema.locale)?;
    let report = run_crossval(&spec, &dataset, cfg.folds, cfg.seed)?;
    let embedding = cfg.embeddings_primary.as_deref().map(file_stem).unwrap_or_default();
    let rows = [CrossValRow {
        model: model_label(cfg),
        embedding,
        report: &report,
    }];
    println!("{}", render_crossval_table(&rows));
    println!();
    println!("{}", render_fold_table(&report));
    if let Some(dir) = out_dir(cfg)? {
        write_file(&dir.join("crossval.csv"), &crossval_csv(&rows))?;
        write_file(&dir.join("crossval_folds.txt"), &render_fold_table(&report))?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, model_file: &Path) -> Result<()> {
    let model = load_model(model_file)?.model;
    let external = data_paths(cfg)?
        .iter()
        .map(|p| Ok((file_stem(p), load_products(p, &cfg.schema)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = cross_platform_eval(&model, model.taxonomy(), &external)?;
    println!("{}", render_platform_table(&rows));
    if let Some(dir) = out_dir(cfg)? {
        write_file(&dir.join("platform.csv"), &platform_csv(&rows))?;
    }
    Ok(())
}

fn read_lines(input: &Path) -> Result<Vec<String>> {
    let reader: Box<dyn BufRead> = if input == Path::new("-") {
        Box::new(BufReader::new(std::io::stdin()))
    } else {
        Box::new(BufReader::new(File::open(input).map_err(|e| Error::io(input, e))?))
    };
    reader
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(input, e))
}

pub fn predict(model_file: &Path, titles: &[String], input: Option<&Path>, probabilities: bool) -> Result<()> {
    let model = load_model(model_file)?.model;
    let mut lines = titles.to_vec();
    if let Some(input) = input {
        lines.extend(read_lines(input)?);
    }
    if lines.is_empty() {
        return Err(config_error("title", "give --title or --input"));
    }
    let taxonomy = model.taxonomy();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let io = |e| Error::io("<stdout>", e);
    let header = if probabilities {
        "title\tcategory\tsubcategory\tp_category\tp_subcategory"
    } else {
        "title\tcategory\tsubcategory"
    };
    writeln!(out, "{header}").map_err(io)?;
    for (i, line) in lines.iter().enumerate() {
        let (primary, secondary) = match line.split_once('\t') {
            Some((a, b)) => (a, Some(b)),
            None => (line.as_str(), None),
        };
        if primary.trim().is_empty() {
            writeln!(out, "{primary}\tERROR\tempty title").map_err(io)?;
            continue;
        }
        let mut product = Product::new((i + 1).to_string(), primary, "", "");
        product.title_secondary = secondary.map(str::to_owned);
        match model.predict(&product) {
            Ok(p) => {
                let cat = &taxonomy.categories()[p.category];
                let sub = &taxonomy.subcategories()[p.subcategory];
                if probabilities {
                    writeln!(
                        out,
                        "{primary}\t{cat}\t{sub}\t{:.6}\t{:.6}",
                        p.category_scores[p.category], p.subcategory_scores[p.subcategory]
                    )
                } else {
                    writeln!(out, "{primary}\t{cat}\t{sub}")
                }
                .map_err(io)?
            }
            Err(e) => writeln!(out, "{primary}\tERROR\t{e}").map_err(io)?,
        }
    }
    Ok(())
}

pub fn audit(cfg: &RunConfig, model_file: &Path, limit: usize) -> Result<()> {
    let model = load_model(model_file)?.model;
    let dataset = Dataset::from_products(load_all(cfg)?, cfg.schema.locale)?;
    let entries = misprediction_report(&model, &dataset, limit)?;
    println!("{}", render_audit_table(&entries));
    if let Some(dir) = out_dir(cfg)? {
        write_file(&dir.join("audit.csv"), &audit_csv(&entries))?;
    }
    Ok(())
}

pub fn synth(settings: &BTreeMap<String, String>, titles_per_subcategory: usize, dim: usize) -> Result<()> {
    let get = |k: &str| settings.get(k).map(String::as_str);
    let dir = PathBuf::from(get("out").ok_or_else(|| config_error("out", "synth needs an output directory"))?);
    let mut cfg = SynthConfig {
        titles_per_subcategory,
        bilingual: matches!(get("bilingual"), Some("true" | "yes" | "on" | "1")),
        ..SynthConfig::default()
    };
    if let Some(seed) = get("seed") {
        cfg.seed = seed
            .parse()
            .map_err(|_| config_error("seed", &format!("cannot parse `{seed}`")))?;
    }
    let products = generate_products(&cfg)?;
    let (primary, secondary) = embeddings_for(&products, dim, cfg.seed)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let create = |name: &str| {
        let path = dir.join(name);
        File::create(&path).map_err(|e| Error::io(path, e))
    };
    write_products(&products, create("products.csv")?)?;
    primary
        .write_text(create("embeddings.primary.vec")?)
        .map_err(|e| Error::io(dir.join("embeddings.primary.vec"), e))?;
    if cfg.bilingual {
        secondary
            .write_text(create("embeddings.secondary.vec")?)
            .map_err(|e| Error::io(dir.join("embeddings.secondary.vec"), e))?;
    }
    println!(
        "wrote {} titles ({} categories, {} subcategories) to {}",
        products.len(),
        cfg.categories,
        cfg.categories * cfg.subcategories_per_category,
        dir.display()
    );
    Ok(())
}
