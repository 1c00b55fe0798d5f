//! Run configuration: a flat `key = value` file merged with command-line
//! overrides (flag > file > default), validated as a whole before any work.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::corpus::Schema;
use crate::error::{Error, Result};
use crate::features::Locale;
use crate::linear::LinearConfig;
use crate::model::ModelFamily;
use crate::neural::{EncoderConfig, EncoderKind, NetworkConfig, TowerKind, TrainConfig};

/// Parses `key = value` lines. `#` starts a comment line; blank lines are
/// ignored; keys may use `-` or `_` interchangeably.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: line.to_owned(),
                reason: format!("line {}: expected `key = value`", i + 1),
            });
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::Config {
                key: String::new(),
                reason: format!("line {}: empty key", i + 1),
            });
        }
        if out.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(Error::Config {
                key,
                reason: format!("line {}: duplicate key", i + 1),
            });
        }
    }
    Ok(out)
}

pub fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub data: Vec<PathBuf>,
    pub schema: Schema,
    pub family: ModelFamily,
    pub encoder: EncoderConfig,
    pub dense_units: usize,
    pub masking: bool,
    pub independent_heads: bool,
    pub bilingual: bool,
    pub embeddings_primary: Option<PathBuf>,
    pub embeddings_secondary: Option<PathBuf>,
    pub train: TrainConfig,
    pub linear: LinearConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub folds: usize,
    pub train_fraction: f64,
    pub inline_embeddings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data: Vec::new(),
            schema: Schema::default(),
            family: ModelFamily::Neural,
            encoder: EncoderConfig::default(),
            dense_units: NetworkConfig::default().dense_units,
            masking: true,
            independent_heads: false,
            bilingual: false,
            embeddings_primary: None,
            embeddings_secondary: None,
            train: TrainConfig::default(),
            linear: LinearConfig::default(),
            seed: 0,
            out: None,
            folds: 5,
            train_fraction: 0.9,
            inline_embeddings: false,
        }
    }
}

/// Keys accepted in config files and as overrides.
pub const KEYS: &[&str] = &[
    "data",
    "out",
    "seed",
    "model",
    "encoder",
    "tower",
    "mask",
    "bilingual",
    "independent_heads",
    "embeddings_primary",
    "embeddings_secondary",
    "col_title",
    "col_title2",
    "col_category",
    "col_subcategory",
    "delimiter",
    "locale",
    "namespace_subcategories",
    "hidden_size",
    "max_tokens",
    "dense_units",
    "fine_tune_embeddings",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "linear_c",
    "linear_epochs",
    "folds",
    "train_fraction",
    "inline_embeddings",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        key: key.to_owned(),
        reason: format!("cannot parse `{v}`"),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_owned(),
            reason: format!("expected a boolean, got `{v}`"),
        }),
    }
}

fn named<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config {
        key: key.to_owned(),
        reason: e.to_string(),
    })
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Merges `file` and `overrides` (which win) over the defaults and
    /// validates the result.
    pub fn resolve(
        command: &str,
        file: &BTreeMap<String, String>,
        overrides: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut merged = file.clone();
        merged.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut cfg = RunConfig {
            command: command.to_owned(),
            ..RunConfig::default()
        };
        let mut mask: Option<bool> = None;
        let mut encoder_set = false;
        for (key, v) in &merged {
            let key = key.as_str();
            match key {
                "data" => {
                    cfg.data = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(PathBuf::from)
                        .collect()
                }
                "out" => cfg.out = optional_path(v),
                "seed" => cfg.seed = parse(key, v)?,
                "model" => cfg.family = named(key, v)?,
                "encoder" => {
                    cfg.encoder.kind = named::<EncoderKind>(key, v)?;
                    encoder_set = true;
                }
                "tower" => cfg.encoder.tower = named::<TowerKind>(key, v)?,
                "mask" => mask = Some(parse_bool(key, v)?),
                "bilingual" => cfg.bilingual = parse_bool(key, v)?,
                "independent_heads" => cfg.independent_heads = parse_bool(key, v)?,
                "embeddings_primary" => cfg.embeddings_primary = optional_path(v),
                "embeddings_secondary" => cfg.embeddings_secondary = optional_path(v),
                "col_title" => cfg.schema.title = v.clone(),
                "col_title2" => cfg.schema.title_secondary = (!v.is_empty()).then(|| v.clone()),
                "col_category" => cfg.schema.category = v.clone(),
                "col_subcategory" => cfg.schema.subcategory = v.clone(),
                "delimiter" => {
                    cfg.schema.delimiter = match v.as_str() {
                        "tab" | "\\t" => b'\t',
                        s if s.len() == 1 && s.is_ascii() => s.as_bytes()[0],
                        _ => {
                            return Err(Error::Config {
                                key: key.into(),
                                reason: "delimiter must be a single ASCII character or `tab`".into(),
                            })
                        }
                    }
                }
                "locale" => cfg.schema.locale = named::<Locale>(key, v)?,
                "namespace_subcategories" => cfg.schema.namespace_subcategories = parse_bool(key, v)?,
                "hidden_size" => cfg.encoder.hidden_size = parse(key, v)?,
                "max_tokens" => cfg.encoder.max_tokens = parse(key, v)?,
                "dense_units" => cfg.dense_units = parse(key, v)?,
                "fine_tune_embeddings" => cfg.encoder.fine_tune_embeddings = parse_bool(key, v)?,
                "learning_rate" => cfg.train.learning_rate = parse(key, v)?,
                "batch_size" => cfg.train.batch_size = parse(key, v)?,
                "max_epochs" => cfg.train.max_epochs = parse(key, v)?,
                "patience" => cfg.train.patience = parse(key, v)?,
                "linear_c" => cfg.linear.c = parse(key, v)?,
                "linear_epochs" => cfg.linear.epochs = parse(key, v)?,
                "folds" => cfg.folds = parse(key, v)?,
                "train_fraction" => cfg.train_fraction = parse(key, v)?,
                "inline_embeddings" => cfg.inline_embeddings = parse_bool(key, v)?,
                _ => {
                    return Err(Error::Config {
                        key: key.to_owned(),
                        reason: "unknown key".into(),
                    })
                }
            }
        }
        if cfg.bilingual && !encoder_set && cfg.family == ModelFamily::Neural {
            cfg.encoder.kind = EncoderKind::DualTower;
        }
        cfg.masking = match (mask, cfg.family) {
            (Some(true), ModelFamily::Linear) => {
                return Err(Error::Config {
                    key: "mask".into(),
                    reason: "masking requires the neural model family".into(),
                })
            }
            (Some(m), _) => m,
            (None, family) => family == ModelFamily::Neural,
        };
        cfg.train.seed = cfg.seed;
        cfg.linear.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field invariants; every violation is a named config error.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.masking && self.family != ModelFamily::Neural {
            return fail("mask", "masking requires the neural model family");
        }
        if self.bilingual {
            if self.embeddings_secondary.is_none() {
                return fail("embeddings_secondary", "bilingual runs require a secondary embedding file");
            }
            if self.schema.title_secondary.is_none() {
                return fail("col_title2", "bilingual runs require a secondary title column");
            }
            if self.family == ModelFamily::Linear {
                return fail("bilingual", "the linear model uses the primary title only");
            }
        }
        if self.family == ModelFamily::Neural && (self.encoder.kind == EncoderKind::DualTower) != self.bilingual {
            return fail("encoder", "the dual_tower encoder is used exactly when bilingual is set");
        }
        if self.family == ModelFamily::Neural {
            if self.encoder.hidden_size == 0 || self.encoder.max_tokens == 0 || self.dense_units == 0 {
                return fail("hidden_size", "hidden_size, max_tokens and dense_units must be positive");
            }
            self.train.validate().or_else(|e| fail("learning_rate", &e.to_string()))?;
        } else if !(self.linear.c > 0.0 && self.linear.c.is_finite()) || self.linear.epochs == 0 {
            return fail("linear_c", "C must be positive and finite and linear_epochs at least 1");
        }
        if self.folds < 2 {
            return fail("folds", "at least 2 folds are required");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction", "must lie strictly between 0 and 1");
        }
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            encoder: self.encoder,
            dense_units: self.dense_units,
            masking: self.masking,
            independent_heads: self.independent_heads,
        }
    }

    /// Effective configuration as key/value pairs, for run metadata.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let family = match self.family {
            ModelFamily::Linear => "linear",
            ModelFamily::Neural => "neural",
        };
        let kind = match self.encoder.kind {
            EncoderKind::MeanPool => "mean_pool",
            EncoderKind::BiRecurrent => "bi_recurrent",
            EncoderKind::DualTower => "dual_tower",
        };
        let tower = match self.encoder.tower {
            TowerKind::MeanPool => "mean_pool",
            TowerKind::BiRecurrent => "bi_recurrent",
        };
        let delimiter = match self.schema.delimiter {
            b'\t' => "tab".to_owned(),
            d => (d as char).to_string(),
        };
        let data: Vec<String> = self.data.iter().map(|p| p.display().to_string()).collect();
        [
            ("data", data.join(",")),
            ("out", path(&self.out)),
            ("seed", self.seed.to_string()),
            ("model", family.into()),
            ("encoder", kind.into()),
            ("tower", tower.into()),
            ("mask", self.masking.to_string()),
            ("bilingual", self.bilingual.to_string()),
            ("independent_heads", self.independent_heads.to_string()),
            ("embeddings_primary", path(&self.embeddings_primary)),
            ("embeddings_secondary", path(&self.embeddings_secondary)),
            ("col_title", self.schema.title.clone()),
            ("col_title2", self.schema.title_secondary.clone().unwrap_or_default()),
            ("col_category", self.schema.category.clone()),
            ("col_subcategory", self.schema.subcategory.clone()),
            ("delimiter", delimiter),
            ("locale", self.schema.locale.as_str().into()),
            ("namespace_subcategories", self.schema.namespace_subcategories.to_string()),
            ("hidden_size", self.encoder.hidden_size.to_string()),
            ("max_tokens", self.encoder.max_tokens.to_string()),
            ("dense_units", self.dense_units.to_string()),
            ("fine_tune_embeddings", self.encoder.fine_tune_embeddings.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("max_epochs", self.train.max_epochs.to_string()),
            ("patience", self.train.patience.to_string()),
            ("linear_c", self.linear.c.to_string()),
            ("linear_epochs", self.linear.epochs.to_string()),
            ("folds", self.folds.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("inline_embeddings", self.inline_embeddings.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }
}
