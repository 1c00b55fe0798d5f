//! Category→subcategory mask matrix and the masked subcategory softmax.

use crate::corpus::Taxonomy;
use crate::error::{Error, Result};

/// Additive smoothing term of the masked softmax, `e^-8`.
pub const MASK_SMOOTHING: f64 = 3.354_626_279_025_118_4e-4;

/// Binary `C × S` matrix with `M[c][s] = 1` iff `s` is a child of `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyMask {
    categories: usize,
    subcategories: usize,
    data: Vec<bool>,
}

impl HierarchyMask {
    pub fn num_categories(&self) -> usize {
        self.categories
    }

    pub fn num_subcategories(&self) -> usize {
        self.subcategories
    }

    pub fn row(&self, category: usize) -> &[bool] {
        &self.data[category * self.subcategories..(category + 1) * self.subcategories]
    }

    pub fn get(&self, category: usize, subcategory: usize) -> bool {
        self.row(category)[subcategory]
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.categories)
            .map(|c| self.row(c).iter().filter(|&&m| m).count())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.subcategories)
            .map(|s| (0..self.categories).filter(|&c| self.get(c, s)).count())
            .collect()
    }
}

pub fn build_mask(taxonomy: &Taxonomy) -> HierarchyMask {
    let (c, s) = (taxonomy.num_categories(), taxonomy.num_subcategories());
    let mut data = vec![false; c * s];
    for (sub, &parent) in taxonomy.parents().iter().enumerate() {
        data[parent * s + sub] = true;
    }
    HierarchyMask {
        categories: c,
        subcategories: s,
        data,
    }
}

/// Plain softmax, shifted by the maximum logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&o| (o - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSoftmax {
    pub probs: Vec<f64>,
    /// The mask row selected nothing; `probs` is the uniform fallback.
    pub all_masked: bool,
}

/// Position of the largest logit among unmasked entries.
fn unmasked_argmax(logits: &[f64], mask_row: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&o, &m)) in logits.iter().zip(mask_row).enumerate() {
        if m && best.is_none_or(|b| o > logits[b]) {
            best = Some(i);
        }
    }
    best
}

/// `P(s) = (exp(O_s − m)·M_s + e⁻⁸) / Σ_s' (exp(O_s' − m)·M_s' + e⁻⁸)` where `m`
/// is the largest unmasked logit.
///
/// The smoothing term sits inside the sum, once per subcategory, so the
/// result is a distribution. An all-zero row yields the uniform distribution.
pub fn masked_softmax(logits: &[f64], mask_row: &[bool]) -> Result<MaskedSoftmax> {
    if logits.len() != mask_row.len() {
        return Err(Error::DimensionMismatch {
            expected: mask_row.len(),
            found: logits.len(),
        });
    }
    let Some(top) = unmasked_argmax(logits, mask_row) else {
        log::warn!("masked softmax called with an all-zero mask row");
        let n = logits.len() as f64;
        return Ok(MaskedSoftmax {
            probs: vec![1.0 / n; logits.len()],
            all_masked: true,
        });
    };
    let shift = logits[top];
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask_row)
        .map(|(&o, &m)| if m { (o - shift).exp() } else { 0.0 } + MASK_SMOOTHING)
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(MaskedSoftmax {
        probs,
        all_masked: false,
    })
}

/// Vector-Jacobian product of [`masked_softmax`]: maps `∂L/∂P` to `∂L/∂O`.
///
/// `probs` must be the forward output for the same `logits` and `mask_row`.
pub fn masked_softmax_vjp(logits: &[f64], mask_row: &[bool], probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let Some(top) = unmasked_argmax(logits, mask_row) else {
        return vec![0.0; logits.len()];
    };
    let shift = logits[top];
    // u_s = a_s + ε with a_s = exp(O_s - m)·M_s, Z = Σ u, P = u / Z
    let a: Vec<f64> = logits
        .iter()
        .zip(mask_row)
        .map(|(&o, &m)| if m { (o - shift).exp() } else { 0.0 })
        .collect();
    let z: f64 = a.iter().map(|x| x + MASK_SMOOTHING).sum();
    let mean: f64 = grad_probs.iter().zip(probs).map(|(g, p)| g * p).sum();
    // ∂L/∂u_s = (g_s − Σ g·P) / Z
    let du: Vec<f64> = grad_probs.iter().map(|g| (g - mean) / z).collect();
    let mut grad: Vec<f64> = du.iter().zip(&a).map(|(d, a)| d * a).collect();
    // m moves with the top logit and shifts every a_s by −a_s
    let through_shift: f64 = grad.iter().sum();
    grad[top] -= through_shift;
    grad
}

/// Vector-Jacobian product of [`softmax`].
pub fn softmax_vjp(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let mean: f64 = grad_probs.iter().zip(probs).map(|(g, p)| g * p).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - mean))
        .collect()
}
