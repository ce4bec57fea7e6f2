use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::softmax_row;

/// Logits and softmax probabilities for the `J + 1` predicted slots of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBlock<S> {
    slots: usize,
    classes: usize,
    logits: Vec<S>,
    probs: Vec<S>,
}

impl<S: Scalar> LogitsBlock<S> {
    /// `logits` is row-major `[slots, classes]`.
    pub fn new(slots: usize, classes: usize, logits: Vec<S>) -> Result<Self> {
        if slots == 0 || classes == 0 || logits.len() != slots * classes {
            bail!(
                Dimension,
                "{} logits do not form a {}x{} block",
                logits.len(),
                slots,
                classes
            );
        }
        let probs = logits.chunks(classes).flat_map(softmax_row).collect();
        Ok(Self {
            slots,
            classes,
            logits,
            probs,
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logits_row(&self, slot: usize) -> &[S] {
        &self.logits[slot * self.classes..(slot + 1) * self.classes]
    }

    pub fn probs_row(&self, slot: usize) -> &[S] {
        &self.probs[slot * self.classes..(slot + 1) * self.classes]
    }

    /// Predicted beam per slot: argmax probability, lowest index on ties.
    pub fn predict_beams(&self) -> Vec<usize> {
        (0..self.slots).map(|s| argmax(self.probs_row(s))).collect()
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<S: PartialOrd + Copy>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
