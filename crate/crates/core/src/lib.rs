//! Hierarchical (category → subcategory) product-title classification:
//! dataset loading, TF-IDF-weighted embedding features, a linear baseline,
//! neural classifiers with a hierarchy-masked softmax, evaluation, and a
//! versioned model container.
//!
//! ```no_run
//! use std::sync::Arc;
//! use prodcat::corpus::{load_dataset, train_val_split, Schema};
//! use prodcat::eval::evaluate;
//! use prodcat::features::load_embeddings;
//! use prodcat::model::{ModelFamily, ModelSpec};
//! use prodcat::neural::{EncoderConfig, EncoderKind, NetworkConfig, TrainConfig};
//!
//! # fn main() -> prodcat::Result<()> {
//! let data = load_dataset("products.csv", &Schema::default())?;
//! let (train, val) = train_val_split(&data, 0.9, 7)?;
//! let spec = ModelSpec {
//!     family: ModelFamily::Neural,
//!     linear: Default::default(),
//!     network: NetworkConfig {
//!         encoder: EncoderConfig { kind: EncoderKind::MeanPool, ..Default::default() },
//!         ..Default::default()
//!     },
//!     train: TrainConfig::default(),
//!     embeddings: vec![Arc::new(load_embeddings("tr.vec")?)],
//! };
//! let (model, _log) = spec.train_model(&train, &val, 7)?;
//! println!("{:?}", evaluate(&model, &val)?);
//! # Ok(())
//! # }
//! ```

pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod linear;
pub mod model;
pub mod neural;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
