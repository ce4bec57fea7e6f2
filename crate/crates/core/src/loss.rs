//! Focal loss and the multi-slot task loss.

use crate::error::{bail, Result};
use crate::model::LogitsBlock;
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, softmax_row as softmax};

/// Probability clamp used for the `(1 - p)^gamma` modulating factor.
const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Focusing parameter; 0 recovers cross-entropy.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

impl LossConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            bail!(Config, "gamma must be a finite value >= 0, got {}", gamma);
        }
        Ok(Self { gamma })
    }
}

/// Focal loss of one logit row and its gradient with respect to the logits.
///
/// `log p` comes from the max-subtracted log-softmax; the modulating factor
/// uses `p` clamped to `[1e-12, 1 - 1e-12]`.
pub(crate) fn focal_row<S: Scalar>(logits: &[S], truth: usize, gamma: S) -> Result<(S, Vec<S>)> {
    if truth >= logits.len() {
        bail!(Index, "label {} out of range for {} classes", truth, logits.len());
    }
    if logits.iter().any(|v| v.is_nan()) {
        bail!(Numeric, "NaN logit");
    }
    let log_p = logits[truth] - log_sum_exp(logits);
    let p = log_p.exp();
    let (lo, hi) = (S::of(P_CLAMP), S::one() - S::of(P_CLAMP));
    let clamped = p.max(lo).min(hi);
    let weight = (S::one() - clamped).powf(gamma);
    let loss = -weight * log_p;

    // d loss / d log p
    let mut dlog_p = -weight;
    if gamma != S::zero() && p > lo && p < hi {
        dlog_p += gamma * (S::one() - clamped).powf(gamma - S::one()) * clamped * log_p;
    }
    let probs = softmax(logits);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(c, &pc)| {
            let indicator = if c == truth { S::one() } else { S::zero() };
            dlog_p * (indicator - pc)
        })
        .collect();
    Ok((loss, grad))
}

/// `-(1 - p_truth)^gamma * ln p_truth` with `p = softmax(logits)`; `truth` is 0-based.
pub fn focal_loss<S: Scalar>(logits: &[S], truth: usize, gamma: S) -> Result<S> {
    focal_row(logits, truth, gamma).map(|(loss, _)| loss)
}

/// Plain cross-entropy `-ln softmax(logits)[truth]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], truth: usize) -> Result<S> {
    if truth >= logits.len() {
        bail!(Index, "label {} out of range for {} classes", truth, logits.len());
    }
    Ok(log_sum_exp(logits) - logits[truth])
}

/// Sum of per-slot focal losses over the `J + 1` predicted slots.
pub fn task_loss<S: Scalar>(block: &LogitsBlock<S>, labels: &[usize], gamma: S) -> Result<S> {
    if labels.len() != block.slots() {
        bail!(
            Dimension,
            "{} labels for a block of {} slots",
            labels.len(),
            block.slots()
        );
    }
    labels
        .iter()
        .enumerate()
        .map(|(slot, &label)| focal_loss(block.logits_row(slot), label, gamma))
        .sum()
}
