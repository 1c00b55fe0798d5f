//! One-vs-rest linear max-margin classifier trained in the primal.
//!
//! Each class gets a binary hinge-loss problem
//! `λ/2 ‖(w, b)‖² + 1/n Σ max(0, 1 − y (w·x + b))` with `λ = 1 / (C n)`, which is
//! the usual `½‖w‖² + C Σ hinge` objective rescaled by `1 / (C n)`. It is
//! solved by stochastic subgradient steps `η_t = 1 / (λ t)` followed by a
//! projection onto the ball of radius `1/√λ`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_EPOCHS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearConfig {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            c: DEFAULT_C,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// Class ids in ascending order; row `k` of `weights` scores `classes[k]`.
    classes: Vec<usize>,
    dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    c: f64,
}

impl LinearModel {
    pub fn from_parts(classes: Vec<usize>, dim: usize, weights: Vec<f64>, biases: Vec<f64>, c: f64) -> Result<Self> {
        if classes.is_empty() || biases.len() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: classes.len(),
                found: biases.len(),
            });
        }
        if weights.len() != classes.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: classes.len() * dim,
                found: weights.len(),
            });
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: "linear".into(),
            });
        }
        Ok(LinearModel {
            classes,
            dim,
            weights,
            biases,
            c,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.dim.max(1))
            .take(self.classes.len())
            .zip(&self.biases)
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class id and the per-class scores in class order.
pub fn predict_linear(model: &LinearModel, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let scores = model.scores(x)?;
    Ok((model.classes[argmax(&scores)], scores))
}

fn validate(vectors: &[Vec<f64>], labels: &[usize], config: &LinearConfig) -> Result<(usize, Vec<usize>)> {
    if vectors.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.len(),
            found: labels.len(),
        });
    }
    if !(config.c > 0.0 && config.c.is_finite()) || config.epochs == 0 {
        return Err(Error::InvalidArgument("C and epochs must be positive".into()));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "linear classifier needs at least two distinct labels".into(),
        ));
    }
    Ok((dim, classes))
}

struct Binary {
    w: Vec<f64>,
    b: f64,
}

impl Binary {
    fn objective(&self, lambda: f64, vectors: &[Vec<f64>], targets: &[f64]) -> f64 {
        let hinge: f64 = vectors
            .iter()
            .zip(targets)
            .map(|(x, y)| (1.0 - y * (dot(&self.w, x) + self.b)).max(0.0))
            .sum();
        let norm = dot(&self.w, &self.w) + self.b * self.b;
        0.5 * lambda * norm + hinge / vectors.len() as f64
    }
}

fn train_binary(
    vectors: &[Vec<f64>],
    targets: &[f64],
    lambda: f64,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    history: &mut [f64],
) -> Binary {
    let dim = vectors[0].len();
    let mut m = Binary {
        w: vec![0.0; dim],
        b: 0.0,
    };
    let radius = 1.0 / lambda.sqrt();
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    let mut t = 0u64;
    for slot in history.iter_mut().take(epochs) {
        order.shuffle(rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &vectors[i];
            let y = targets[i];
            let margin = y * (dot(&m.w, x) + m.b);
            let shrink = 1.0 - eta * lambda;
            m.w.iter_mut().for_each(|w| *w *= shrink);
            m.b *= shrink;
            if margin < 1.0 {
                for (w, xi) in m.w.iter_mut().zip(x) {
                    *w += eta * y * xi;
                }
                m.b += eta * y;
            }
            let norm = (dot(&m.w, &m.w) + m.b * m.b).sqrt();
            if norm > radius {
                let s = radius / norm;
                m.w.iter_mut().for_each(|w| *w *= s);
                m.b *= s;
            }
        }
        *slot += m.objective(lambda, vectors, targets);
    }
    m
}

/// Trains and also returns the regularized hinge objective after each epoch,
/// summed over the one-vs-rest sub-problems.
pub fn train_linear_ovr_with_history(
    vectors: &[Vec<f64>],
    labels: &[usize],
    config: &LinearConfig,
) -> Result<(LinearModel, Vec<f64>)> {
    let (dim, classes) = validate(vectors, labels, config)?;
    let lambda = 1.0 / (config.c * vectors.len() as f64);
    let mut weights = Vec::with_capacity(classes.len() * dim);
    let mut biases = Vec::with_capacity(classes.len());
    let mut history = vec![0.0; config.epochs];
    for (k, &class) in classes.iter().enumerate() {
        let targets: Vec<f64> = labels
            .iter()
            .map(|&l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let m = train_binary(vectors, &targets, lambda, config.epochs, &mut rng, &mut history);
        weights.extend(m.w);
        biases.push(m.b);
    }
    let model = LinearModel::from_parts(classes, dim, weights, biases, config.c)?;
    Ok((model, history))
}

pub fn train_linear_ovr(vectors: &[Vec<f64>], labels: &[usize], config: &LinearConfig) -> Result<LinearModel> {
    train_linear_ovr_with_history(vectors, labels, config).map(|(m, _)| m)
}
