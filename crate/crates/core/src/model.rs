//! Trained hierarchical classifiers behind one prediction interface, and the
//! specification used to train them.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Product, Taxonomy};
use crate::error::{Error, Result};
use crate::features::{embed_title_weighted, fit_tfidf, tokenize, EmbeddingTable, Locale, Vocabulary};
use crate::linear::{argmax, train_linear_ovr, LinearConfig, LinearModel};
use crate::neural::{softmax, train_network, ClassifierNetwork, EncoderKind, NetworkConfig, TrainConfig, TrainLog};

/// Category and subcategory decision with per-class distributions over the
/// model's taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub category: usize,
    pub subcategory: usize,
    pub category_scores: Vec<f64>,
    pub subcategory_scores: Vec<f64>,
}

impl Prediction {
    pub fn subcategory_confidence(&self) -> f64 {
        self.subcategory_scores[self.subcategory]
    }

    pub fn is_consistent(&self, taxonomy: &Taxonomy) -> bool {
        taxonomy.parent(self.subcategory) == self.category
    }
}

pub trait HierarchicalClassifier: Send + Sync {
    fn taxonomy(&self) -> &Taxonomy;

    fn predict(&self, product: &Product) -> Result<Prediction>;
}

pub trait Trainer: Sync {
    fn fit(&self, train: &Dataset, val: &Dataset, seed: u64) -> Result<Box<dyn HierarchicalClassifier>>;
}

/// TF-IDF-weighted embedding features feeding one linear model per level.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPipeline {
    pub taxonomy: Taxonomy,
    pub locale: Locale,
    pub vocabulary: Vocabulary,
    pub embeddings: Arc<EmbeddingTable>,
    pub category: LinearModel,
    pub subcategory: LinearModel,
}

/// Spreads scores over a full label space; labels the model never saw get
/// zero probability.
fn scatter_softmax(model: &LinearModel, scores: &[f64], width: usize) -> Vec<f64> {
    let probs = softmax(scores);
    let mut out = vec![0.0; width];
    for (&class, p) in model.classes().iter().zip(probs) {
        out[class] = p;
    }
    out
}

impl LinearPipeline {
    pub fn fit(train: &Dataset, embeddings: Arc<EmbeddingTable>, config: &LinearConfig) -> Result<Self> {
        let locale = train.locale();
        let tokens: Vec<_> = train
            .products()
            .iter()
            .map(|p| tokenize(&p.title_primary, locale))
            .collect();
        let vocabulary = fit_tfidf(&tokens)?;
        let vectors: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| embed_title_weighted(t, &vocabulary, &embeddings).values)
            .collect();
        let cats: Vec<usize> = train.golds().iter().map(|g| g.0).collect();
        let subs: Vec<usize> = train.golds().iter().map(|g| g.1).collect();
        Ok(LinearPipeline {
            taxonomy: train.taxonomy().clone(),
            locale,
            category: train_linear_ovr(&vectors, &cats, config)?,
            subcategory: train_linear_ovr(&vectors, &subs, config)?,
            vocabulary,
            embeddings,
        })
    }

    pub fn features(&self, product: &Product) -> Vec<f64> {
        let tokens = tokenize(&product.title_primary, self.locale);
        embed_title_weighted(&tokens, &self.vocabulary, &self.embeddings).values
    }
}

impl HierarchicalClassifier for LinearPipeline {
    fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    /// Scores are a softmax over the one-vs-rest margins.
    fn predict(&self, product: &Product) -> Result<Prediction> {
        let x = self.features(product);
        let cs = self.category.scores(&x)?;
        let ss = self.subcategory.scores(&x)?;
        Ok(Prediction {
            category: self.category.classes()[argmax(&cs)],
            subcategory: self.subcategory.classes()[argmax(&ss)],
            category_scores: scatter_softmax(&self.category, &cs, self.taxonomy.num_categories()),
            subcategory_scores: scatter_softmax(&self.subcategory, &ss, self.taxonomy.num_subcategories()),
        })
    }
}

impl HierarchicalClassifier for ClassifierNetwork {
    fn taxonomy(&self) -> &Taxonomy {
        ClassifierNetwork::taxonomy(self)
    }

    fn predict(&self, product: &Product) -> Result<Prediction> {
        self.predict_hierarchical(product)
    }
}

/// Predicts the most frequent training category and subcategory for everything.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorityBaseline {
    taxonomy: Taxonomy,
    category: usize,
    subcategory: usize,
}

impl MajorityBaseline {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let t = train.taxonomy();
        let mut cats = vec![0usize; t.num_categories()];
        let mut subs = vec![0usize; t.num_subcategories()];
        for &(c, s) in train.golds() {
            cats[c] += 1;
            subs[s] += 1;
        }
        let top = |v: &[usize]| argmax(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        Ok(MajorityBaseline {
            taxonomy: t.clone(),
            category: top(&cats),
            subcategory: top(&subs),
        })
    }
}

impl HierarchicalClassifier for MajorityBaseline {
    fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn predict(&self, _product: &Product) -> Result<Prediction> {
        let onehot = |n: usize, k: usize| (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        Ok(Prediction {
            category: self.category,
            subcategory: self.subcategory,
            category_scores: onehot(self.taxonomy.num_categories(), self.category),
            subcategory_scores: onehot(self.taxonomy.num_subcategories(), self.subcategory),
        })
    }
}

pub struct MajorityTrainer;

impl Trainer for MajorityTrainer {
    fn fit(&self, train: &Dataset, _val: &Dataset, _seed: u64) -> Result<Box<dyn HierarchicalClassifier>> {
        Ok(Box::new(MajorityBaseline::fit(train)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Linear,
    Neural,
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelFamily::Linear),
            "neural" => Ok(ModelFamily::Neural),
            other => Err(Error::InvalidArgument(format!("unknown model family `{other}`"))),
        }
    }
}

/// A trained model of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearPipeline),
    Neural(ClassifierNetwork),
}

impl Model {
    pub fn family(&self) -> ModelFamily {
        match self {
            Model::Linear(_) => ModelFamily::Linear,
            Model::Neural(_) => ModelFamily::Neural,
        }
    }
}

impl HierarchicalClassifier for Model {
    fn taxonomy(&self) -> &Taxonomy {
        match self {
            Model::Linear(m) => m.taxonomy(),
            Model::Neural(m) => HierarchicalClassifier::taxonomy(m),
        }
    }

    fn predict(&self, product: &Product) -> Result<Prediction> {
        match self {
            Model::Linear(m) => m.predict(product),
            Model::Neural(m) => m.predict(product),
        }
    }
}

/// Everything needed to train a model from a train/validation pair.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub linear: LinearConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Primary-language table first; the secondary one is used by dual-tower encoders.
    pub embeddings: Vec<Arc<EmbeddingTable>>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embeddings.is_empty() {
            return Err(Error::InvalidArgument("a primary embedding table is required".into()));
        }
        if self.family == ModelFamily::Neural {
            self.train.validate()?;
            if self.network.encoder.kind == EncoderKind::DualTower && self.embeddings.len() < 2 {
                return Err(Error::InvalidArgument(
                    "dual-tower encoder requires a secondary embedding table".into(),
                ));
            }
        }
        Ok(())
    }

    /// Trains on `train`, using `val` for early stopping (neural only).
    pub fn train_model(&self, train: &Dataset, val: &Dataset, seed: u64) -> Result<(Model, Option<TrainLog>)> {
        self.validate()?;
        match self.family {
            ModelFamily::Linear => {
                let cfg = LinearConfig { seed, ..self.linear };
                let m = LinearPipeline::fit(train, self.embeddings[0].clone(), &cfg)?;
                Ok((Model::Linear(m), None))
            }
            ModelFamily::Neural => {
                let towers = self.network.encoder.towers();
                let tables: Vec<&EmbeddingTable> = self.embeddings.iter().take(towers).map(|t| t.as_ref()).collect();
                let mut net = ClassifierNetwork::for_dataset(self.network, train, &tables, seed)?;
                let cfg = TrainConfig { seed, ..self.train };
                let log = train_network(&mut net, train, val, &cfg)?;
                Ok((Model::Neural(net), Some(log)))
            }
        }
    }
}

impl Trainer for ModelSpec {
    fn fit(&self, train: &Dataset, val: &Dataset, seed: u64) -> Result<Box<dyn HierarchicalClassifier>> {
        Ok(Box::new(self.train_model(train, val, seed)?.0))
    }
}
