//! Seeded synthetic product catalogs with known structure.
//!
//! Every subcategory owns a pool of 2–4 keywords. A title is one or two
//! keywords from its subcategory's pool mixed with a few words drawn from a
//! noise vocabulary shared by all classes. A small fraction of titles also
//! carries a keyword of some other subcategory ("confuser"), which keeps the
//! task from being perfectly separable.
//!
//! In bilingual mode the discriminative information is split between the two
//! languages: the primary-language keyword pools are shared by subcategory
//! pairs `{0,1}, {2,3}, …` and the secondary-language pools by the shifted
//! pairs `{1,2}, {3,4}, …, {S−1,0}`. Either title alone narrows a product down
//! to two subcategories; both together identify it.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, Product};
use crate::error::{Error, Result};
use crate::features::{tokenize, EmbeddingTable, Locale};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub categories: usize,
    pub subcategories_per_category: usize,
    pub titles_per_subcategory: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub noise_vocabulary: usize,
    pub max_noise_words: usize,
    pub confuser_rate: f64,
    pub bilingual: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 6,
            subcategories_per_category: 3,
            titles_per_subcategory: 200,
            min_keywords: 2,
            max_keywords: 4,
            noise_vocabulary: 60,
            max_noise_words: 4,
            confuser_rate: 0.04,
            bilingual: false,
            seed: 2021,
        }
    }
}

pub fn category_label(c: usize) -> String {
    format!("cat{:02}", c + 1)
}

pub fn subcategory_label(c: usize, s: usize) -> String {
    format!("cat{:02}-sub{:02}", c + 1, s + 1)
}

fn keyword(lang: &str, pool: usize, j: usize) -> String {
    format!("{lang}kw{pool:02}{}", (b'a' + j as u8) as char)
}

fn pools(n: usize, lang: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    (0..n)
        .map(|p| {
            let k = rng.gen_range(cfg.min_keywords..=cfg.max_keywords);
            (0..k).map(|j| keyword(lang, p, j)).collect()
        })
        .collect()
}

fn title(
    own: &[String],
    confuser: Option<&[String]>,
    noise_prefix: &str,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> String {
    let k = rng.gen_range(1..=2).min(own.len());
    let mut words: Vec<String> = own.choose_multiple(rng, k).cloned().collect();
    if let Some(other) = confuser {
        words.push(other.choose(rng).expect("non-empty pool").clone());
    }
    for _ in 0..rng.gen_range(1..=cfg.max_noise_words) {
        words.push(format!("{noise_prefix}{}", rng.gen_range(0..cfg.noise_vocabulary)));
    }
    words.shuffle(rng);
    words.join(" ")
}

pub fn generate_products(cfg: &SynthConfig) -> Result<Vec<Product>> {
    if cfg.categories == 0
        || cfg.subcategories_per_category == 0
        || cfg.titles_per_subcategory == 0
        || cfg.min_keywords == 0
        || cfg.min_keywords > cfg.max_keywords
        || cfg.noise_vocabulary == 0
        || cfg.max_noise_words == 0
        || !(0.0..=1.0).contains(&cfg.confuser_rate)
    {
        return Err(Error::InvalidArgument("invalid synthetic corpus configuration".into()));
    }
    let n_sub = cfg.categories * cfg.subcategories_per_category;
    if cfg.bilingual && n_sub < 3 {
        return Err(Error::InvalidArgument("bilingual corpus needs at least 3 subcategories".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (primary_pools, secondary_pools) = if cfg.bilingual {
        let groups = n_sub.div_ceil(2);
        (pools(groups, "tr", cfg, &mut rng), pools(groups, "en", cfg, &mut rng))
    } else {
        (pools(n_sub, "tr", cfg, &mut rng), Vec::new())
    };
    let primary_pool = |s: usize| if cfg.bilingual { s / 2 } else { s };
    let secondary_pool = |s: usize| ((s + 1) % n_sub) / 2;

    let mut products = Vec::with_capacity(n_sub * cfg.titles_per_subcategory);
    for s in 0..n_sub {
        let c = s / cfg.subcategories_per_category;
        for _ in 0..cfg.titles_per_subcategory {
            let confused = rng.gen_bool(cfg.confuser_rate);
            let other = if confused {
                let mut o = rng.gen_range(0..primary_pools.len() - 1);
                if o >= primary_pool(s) {
                    o += 1;
                }
                Some(o)
            } else {
                None
            };
            let primary = title(
                &primary_pools[primary_pool(s)],
                other.map(|o| primary_pools[o].as_slice()),
                "tn",
                cfg,
                &mut rng,
            );
            let mut p = Product::new(
                (products.len() + 1).to_string(),
                primary,
                category_label(c),
                subcategory_label(c, s % cfg.subcategories_per_category),
            )
            .with_source("synthetic");
            if cfg.bilingual {
                p = p.with_secondary(title(&secondary_pools[secondary_pool(s)], None, "en", cfg, &mut rng));
            }
            products.push(p);
        }
    }
    Ok(products)
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    Dataset::from_products(generate_products(cfg)?, Locale::Turkish)
}

/// Random vectors (uniform in ±1/√dim) for every token of the given titles.
pub fn random_embeddings<'a>(
    titles: impl IntoIterator<Item = &'a str>,
    locale: Locale,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut tokens: Vec<String> = titles
        .into_iter()
        .flat_map(|t| tokenize(t, locale).into_tokens())
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut table = EmbeddingTable::new(dim)?;
    for t in tokens {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-bound..bound)).collect();
        table.insert(&t, &v)?;
    }
    Ok(table)
}

/// Primary- and secondary-language tables covering a product list.
pub fn embeddings_for(products: &[Product], dim: usize, seed: u64) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let primary = random_embeddings(products.iter().map(|p| p.title_primary.as_str()), Locale::Turkish, dim, seed)?;
    let secondary = random_embeddings(
        products.iter().filter_map(|p| p.title_secondary.as_deref()),
        Locale::Generic,
        dim,
        seed ^ 0x5eed,
    )
    .or_else(|_| EmbeddingTable::new(dim))?;
    Ok((primary, secondary))
}

/// Writes `title,title_en,category,subcategory` rows.
pub fn write_products<W: Write>(products: &[Product], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["title", "title_en", "category", "subcategory"])?;
    for p in products {
        w.write_record([
            p.title_primary.as_str(),
            p.title_secondary.as_deref().unwrap_or(""),
            p.category.as_str(),
            p.subcategory.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<dataset>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let d = generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.len(), 3600);
        assert_eq!(d.taxonomy().num_categories(), 6);
        assert_eq!(d.taxonomy().num_subcategories(), 18);
        assert_eq!(d, generate(&SynthConfig::default()).unwrap());
    }

    #[test]
    fn bilingual_titles_split_information() {
        let cfg = SynthConfig {
            bilingual: true,
            titles_per_subcategory: 5,
            confuser_rate: 0.0,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        // subcategories 0 and 1 share primary keywords, 1 and 2 secondary ones
        let kw = |title: &str, prefix: &str| -> Vec<String> {
            title
                .split(' ')
                .filter(|w| w.starts_with(prefix))
                .map(|w| w[..w.len() - 1].to_owned())
                .collect()
        };
        let p = d.products();
        let first = |s: usize| &p[s * 5];
        assert_eq!(kw(&first(0).title_primary, "trkw")[0], kw(&first(1).title_primary, "trkw")[0]);
        assert_ne!(kw(&first(1).title_primary, "trkw")[0], kw(&first(2).title_primary, "trkw")[0]);
        let sec = |s: usize| kw(first(s).title_secondary.as_deref().unwrap(), "enkw")[0].clone();
        assert_eq!(sec(1), sec(2));
        assert_ne!(sec(0), sec(1));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = SynthConfig {
            titles_per_subcategory: 2,
            bilingual: true,
            ..SynthConfig::default()
        };
        let products = generate_products(&cfg).unwrap();
        let mut buf = Vec::new();
        write_products(&products, &mut buf).unwrap();
        let schema = crate::corpus::Schema {
            title_secondary: Some("title_en".into()),
            ..Default::default()
        };
        let back = crate::corpus::read_products(&buf[..], &schema, "synthetic").unwrap();
        assert_eq!(back, products);
    }
}
