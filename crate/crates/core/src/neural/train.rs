use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::ClassifierNetwork;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;

/// Learning rate tuned for large pretrained encoders.
pub const PRETRAINED_LEARNING_RATE: f64 = 3e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
        {
            return Err(Error::InvalidArgument(
                "learning rate, batch size, epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_metric: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// `epoch,train_loss,validation_metric,elapsed_secs` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_metric,elapsed_secs\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.validation_metric, e.elapsed_secs
            ));
        }
        out
    }
}

/// Patience-based stopping rule that remembers the best epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.waited = 0;
            Verdict::Improved
        } else {
            self.waited += 1;
            if self.waited >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam training with a caller-supplied validation score.
///
/// After every epoch `validate` scores the current network; training stops
/// after `patience` epochs without improvement or at `max_epochs`, and the
/// parameters of the best-scoring epoch are restored.
pub fn train_with_validator<F>(
    network: &mut ClassifierNetwork,
    train: &Dataset,
    config: &TrainConfig,
    mut validate: F,
) -> Result<TrainLog>
where
    F: FnMut(&ClassifierNetwork) -> Result<f64>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train.taxonomy() != network.taxonomy() {
        return Err(Error::InvalidArgument(
            "training data and network use different taxonomies".into(),
        ));
    }
    let encoded: Vec<_> = train.products().iter().map(|p| network.encode(p)).collect();
    let frozen = if network.config().encoder.fine_tune_embeddings {
        Vec::new()
    } else {
        network.embedding_ranges()
    };

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(network.num_params(), config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = network.params().to_vec();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; network.num_params()];

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (c, s) = train.gold(i);
                loss_sum += network.accumulate_gradient(&encoded[i], c, s, scale, &mut grad)?;
            }
            for r in &frozen {
                grad[r.clone()].iter_mut().for_each(|g| *g = 0.0);
            }
            adam.step(network.params_mut(), &grad);
        }
        let train_loss = loss_sum / train.len() as f64;
        let metric = validate(network)?;
        if metric.is_nan() {
            return Err(Error::NanMetric {
                epoch,
                diagnostics: format!("train loss {train_loss}"),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            validation_metric: metric,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {train_loss:.5} validation {metric:.5}");
        match stopper.observe(epoch, metric) {
            Verdict::Improved => best.copy_from_slice(network.params()),
            Verdict::Continue => {}
            Verdict::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    network.params_mut().copy_from_slice(&best);
    log.best_epoch = stopper.best_epoch();
    Ok(log)
}

/// Trains with the validation ranking metric (mean of the two weighted F1s)
/// as the early-stopping score.
pub fn train_network(
    network: &mut ClassifierNetwork,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    if val.taxonomy() != network.taxonomy() {
        return Err(Error::InvalidArgument(
            "validation data and network use different taxonomies".into(),
        ));
    }
    let val_encoded: Vec<_> = val.products().iter().map(|p| network.encode(p)).collect();
    train_with_validator(network, train, config, |net| {
        let predictions = val_encoded
            .iter()
            .map(|e| net.predict_encoded(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport::from_indices(net.taxonomy(), val.golds(), &predictions)?.rank_metric)
    })
}
