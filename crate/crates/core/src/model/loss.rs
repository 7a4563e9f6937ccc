//! Label smoothing, cross-entropy, negative cosine similarity and their
//! weighted combination.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{cast, Real};
use crate::error::{Error, Result};

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.15;
const LOG_CLAMP: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

/// Weights of the class and embedding terms in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub embedding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.8,
            embedding: 0.5,
        }
    }
}

pub fn softmax<F: Real>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// `(1 - eps) * onehot + eps / K`.
pub fn label_smooth<F: Real>(onehot: &[F], epsilon: f64) -> Result<Vec<F>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!(
            "label smoothing rate {epsilon} outside [0, 1)"
        )));
    }
    let k = onehot.len() as f64;
    let keep = cast::<F>(1.0 - epsilon);
    let spread = cast::<F>(epsilon / k);
    Ok(onehot.iter().map(|&y| keep * y + spread).collect())
}

/// Smoothed target for a class index.
pub fn smoothed_target<F: Real>(class: usize, num_classes: usize, epsilon: f64) -> Result<Vec<F>> {
    if class >= num_classes {
        return Err(Error::Argument(format!(
            "class {class} out of range for {num_classes} classes"
        )));
    }
    let mut onehot = vec![F::zero(); num_classes];
    onehot[class] = F::one();
    label_smooth(&onehot, epsilon)
}

/// `-sum target * ln(max(p, 1e-12))`.
pub fn cross_entropy<F: Real>(probs: &[F], target: &[F]) -> F {
    let clamp = cast::<F>(LOG_CLAMP);
    probs
        .iter()
        .zip(target)
        .fold(F::zero(), |acc, (&p, &y)| acc - y * p.max(clamp).ln())
}

fn norm<F: Real>(v: &[F]) -> F {
    v.iter().fold(F::zero(), |a, &x| a + x * x).sqrt()
}

/// Negative cosine similarity and its gradient w.r.t. `pred`.
pub fn cosine_loss_with_grad<F: Real>(pred: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if pred.len() != target.len() {
        return Err(Error::Argument(format!(
            "embedding length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let nt = norm(target);
    if nt == F::zero() {
        return Err(Error::DegenerateInput(
            "target embedding has zero norm".into(),
        ));
    }
    let np = norm(pred).max(cast(NORM_FLOOR));
    let dot = pred
        .iter()
        .zip(target)
        .fold(F::zero(), |a, (&p, &t)| a + p * t);
    let cos = dot / (np * nt);
    // d(-cos)/dp = -(t / (|p||t|) - cos * p / |p|^2)
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| cos * p / (np * np) - t / (np * nt))
        .collect();
    Ok((-cos, grad))
}

pub fn cosine_loss<F: Real>(pred: &[F], target: &[F]) -> Result<F> {
    cosine_loss_with_grad(pred, target).map(|(l, _)| l)
}

pub fn combined_loss<F: Real>(ce: F, cos_loss: F, weights: LossWeights) -> F {
    cast::<F>(weights.class) * ce + cast::<F>(weights.embedding) * cos_loss
}
