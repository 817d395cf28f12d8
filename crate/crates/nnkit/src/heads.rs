//! Policy heads: diagonal Gaussian (optionally tanh-squashed) and categorical.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{NnError, Result};

pub const LOG_STD_MIN: f32 = -5.0;
pub const LOG_STD_MAX: f32 = 2.0;
/// Squashed actions are clamped to `±(1 - SQUASH_EPS)` before inversion.
pub const SQUASH_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian over actions with a clamped log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f32>,
    pub log_std: Vec<f32>,
}

impl GaussianHead {
    /// Builds a head, clamping `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f32>, log_std: Vec<f32>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(NnError::dim("gaussian head", mean.len(), log_std.len()));
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    /// Splits a raw network output `[mean | log_std]`.
    pub fn from_output(raw: &[f32]) -> Result<Self> {
        if raw.len() % 2 != 0 {
            return Err(NnError::Config("gaussian head output must have even width".into()));
        }
        let d = raw.len() / 2;
        Self::new(raw[..d].to_vec(), raw[d..].to_vec())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean over dimensions of the per-dimension variance `exp(2 log_std)`.
    pub fn mean_variance(&self) -> f32 {
        let s: f64 = self.log_std.iter().map(|&l| (2.0 * l as f64).exp()).sum();
        (s / self.dim() as f64) as f32
    }

    /// Mode of the squashed distribution, `tanh(mean)`.
    pub fn squashed_mode(&self) -> Vec<f32> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }

    /// Pre-squash sample `mean + std * eps`.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &l)| {
                let eps: f64 = StandardNormal.sample(rng);
                (m as f64 + (l as f64).exp() * eps) as f32
            })
            .collect()
    }

    /// Sample pushed through `tanh`.
    pub fn sample_squashed<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        self.sample_raw(rng).into_iter().map(f32::tanh).collect()
    }
}

/// Log-density of `action` under `head`.
///
/// With `squashed`, `action` is interpreted as `tanh(u)` for a Gaussian `u`
/// and the change-of-variables term `-sum ln(1 - a^2)` is included. Actions
/// at `±1` are clamped to `±(1 - SQUASH_EPS)` first.
pub fn gaussian_logprob(head: &GaussianHead, action: &[f32], squashed: bool) -> Result<f64> {
    if action.len() != head.dim() {
        return Err(NnError::dim("gaussian logprob action", head.dim(), action.len()));
    }
    let mut lp = 0.0f64;
    for ((&a, &m), &ls) in action.iter().zip(&head.mean).zip(&head.log_std) {
        let (u, correction) = if squashed {
            let a = (a as f64).clamp(-1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS);
            (a.atanh(), (1.0 - a * a).ln())
        } else {
            (a as f64, 0.0)
        };
        let ls = ls as f64;
        let z = (u - m as f64) / ls.exp();
        lp += -0.5 * z * z - ls - 0.5 * LN_2PI - correction;
    }
    Ok(lp)
}

/// `log softmax(logits)[class]`, stabilized by subtracting the maximum.
pub fn categorical_logprob(logits: &[f32], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(NnError::Config(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    Ok(logits[class] as f64 - lse)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
