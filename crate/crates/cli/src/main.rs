mod commands;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prodcat::config::{load_config, normalize_key, RunConfig};
use prodcat::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "prodcat", version, about = "Hierarchical product title classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Title length distribution and most frequent n-grams.
    Stats {
        #[command(flatten)]
        common: Common,
        /// N-gram order.
        #[arg(long, default_value_t = 2)]
        ngram: usize,
        /// Drop n-grams seen fewer times than this.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// How many n-grams to print.
        #[arg(long, default_value_t = 20)]
        top: usize,
        /// Write `length,count` rows here for external plotting.
        #[arg(long, value_name = "PATH")]
        histogram: Option<PathBuf>,
    },
    /// Train on a train/validation split and save a model container.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Stratified k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved model on external datasets after taxonomy filtering.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model_file: PathBuf,
    },
    /// Predict category and subcategory for titles.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model_file: PathBuf,
        /// A title to classify; repeatable. A tab separates the second-language title.
        #[arg(long)]
        title: Vec<String>,
        /// File with one title per line (`-` for stdin).
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Add probability columns.
        #[arg(long)]
        probabilities: bool,
    },
    /// List mispredicted titles, most confident first.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model_file: PathBuf,
        #[arg(long, default_value_t = 50)]
        limit: usize,
    },
    /// Write a synthetic labelled corpus and matching random embeddings.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        titles_per_subcategory: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
}

/// Flags shared by every command. Each one maps onto a config key and, when
/// given, overrides the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// Dataset file(s); repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    data: Vec<String>,
    /// `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    #[arg(long, value_parser = ["linear", "neural"])]
    model: Option<String>,
    #[arg(long, value_parser = ["mean_pool", "bi_recurrent", "dual_tower"])]
    encoder: Option<String>,
    /// Per-language encoder inside the dual tower.
    #[arg(long, value_parser = ["mean_pool", "bi_recurrent"])]
    tower: Option<String>,
    /// Restrict subcategory probabilities to the predicted category.
    #[arg(long, overrides_with = "no_mask")]
    mask: bool,
    #[arg(long, overrides_with = "mask")]
    no_mask: bool,
    /// Use both title languages (dual-tower encoder).
    #[arg(long)]
    bilingual: bool,
    #[arg(long)]
    independent_heads: bool,
    #[arg(long, value_name = "PATH")]
    embeddings_primary: Option<String>,
    #[arg(long, value_name = "PATH")]
    embeddings_secondary: Option<String>,
    #[arg(long, value_name = "COLUMN")]
    col_title: Option<String>,
    #[arg(long, value_name = "COLUMN")]
    col_title2: Option<String>,
    #[arg(long, value_name = "COLUMN")]
    col_category: Option<String>,
    #[arg(long, value_name = "COLUMN")]
    col_subcategory: Option<String>,
    #[arg(long)]
    delimiter: Option<String>,
    #[arg(long, value_parser = ["turkish", "tr", "generic", "en"])]
    locale: Option<String>,
    #[arg(long)]
    namespace_subcategories: bool,
    /// Bundle embedding vectors into the model container.
    #[arg(long)]
    inline_embeddings: bool,
    /// Any other config key, e.g. `--set max_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<BTreeMap<String, String>, Error> {
        let mut map = BTreeMap::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                key: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })?;
            map.insert(normalize_key(k), v.trim().to_owned());
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                map.insert(k.to_owned(), v);
            }
        };
        let flag = |b: bool| b.then(|| "true".to_owned());
        put("data", (!self.data.is_empty()).then(|| self.data.join(",")));
        put("seed", self.seed.map(|s| s.to_string()));
        put("out", self.out.clone());
        put("model", self.model.clone());
        put("encoder", self.encoder.clone());
        put("tower", self.tower.clone());
        put("mask", flag(self.mask));
        put("mask", self.no_mask.then(|| "false".to_owned()));
        put("bilingual", flag(self.bilingual));
        put("independent_heads", flag(self.independent_heads));
        put("embeddings_primary", self.embeddings_primary.clone());
        put("embeddings_secondary", self.embeddings_secondary.clone());
        put("col_title", self.col_title.clone());
        put("col_title2", self.col_title2.clone());
        put("col_category", self.col_category.clone());
        put("col_subcategory", self.col_subcategory.clone());
        put("delimiter", self.delimiter.clone());
        put("locale", self.locale.clone());
        put("namespace_subcategories", flag(self.namespace_subcategories));
        put("inline_embeddings", flag(self.inline_embeddings));
        Ok(map)
    }

    fn file(&self) -> Result<BTreeMap<String, String>, Error> {
        match &self.config {
            Some(p) => load_config(p),
            None => Ok(BTreeMap::new()),
        }
    }

    fn resolve(&self, command: &str) -> Result<RunConfig, Error> {
        RunConfig::resolve(command, &self.file()?, &self.overrides()?)
    }

    /// File values with flags applied, unvalidated.
    fn merged(&self) -> Result<BTreeMap<String, String>, Error> {
        let mut map = self.file()?;
        map.extend(self.overrides()?);
        Ok(map)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Stats {
            common,
            ngram,
            min_count,
            top,
            histogram,
        } => commands::stats(&common.resolve("stats")?, ngram, min_count, top, histogram.as_deref()),
        Command::Train { common } => commands::train(&common.resolve("train")?),
        Command::Crossval { common } => commands::crossval(&common.resolve("crossval")?),
        Command::Eval { common, model_file } => commands::eval(&common.resolve("eval")?, &model_file),
        Command::Predict {
            common,
            model_file,
            title,
            input,
            probabilities,
        } => {
            common.resolve("predict")?;
            commands::predict(&model_file, &title, input.as_deref(), probabilities)
        }
        Command::Audit {
            common,
            model_file,
            limit,
        } => commands::audit(&common.resolve("audit")?, &model_file, limit),
        Command::Synth {
            common,
            titles_per_subcategory,
            dim,
        } => commands::synth(&common.merged()?, titles_per_subcategory, dim),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
