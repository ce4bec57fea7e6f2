//! Top-k accuracy and distance-based accuracy (DBA), per slot and averaged.

use crate::error::{bail, Result};
use crate::model::{assemble_batch, LogitsBlock, ModelParams};
use crate::preprocess::PreprocessedStream;
use crate::scalar::Scalar;
use crate::scene::Dataset;

/// The `k` most probable indices, highest first; equal probabilities keep index order.
pub fn top_k_indices<S: Scalar>(probs: &[S], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        bail!(Usage, "k must lie in 1..={}, got {}", probs.len(), k);
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps lower indices first among ties
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    Ok(idx)
}

/// Whether `truth` is among the `k` most probable indices.
pub fn top_k_hit<S: Scalar>(probs: &[S], truth: usize, k: usize) -> Result<bool> {
    if truth >= probs.len() {
        bail!(Index, "label {} outside {} classes", truth, probs.len());
    }
    Ok(top_k_indices(probs, k)?.contains(&truth))
}

/// `max(0, 1 - d / delta)` where `d` is the index distance from `truth` to
/// the nearest of the top-`k` predictions.
pub fn dba_score<S: Scalar>(probs: &[S], truth: usize, k: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        bail!(Domain, "dba delta must be positive, got {}", delta);
    }
    if truth >= probs.len() {
        bail!(Index, "label {} outside {} classes", truth, probs.len());
    }
    let nearest = top_k_indices(probs, k)?
        .into_iter()
        .map(|b| b.abs_diff(truth))
        .min()
        .expect("k >= 1");
    Ok((1.0 - nearest as f64 / delta).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsConfig {
    /// Ranks reported as top1/top3/top5; clipped to the codebook size.
    pub top_ks: [usize; 3],
    pub dba_k: usize,
    pub dba_delta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub mask_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            top_ks: [1, 3, 5],
            dba_k: 3,
            dba_delta: 5.0,
            gamma: 2.0,
            batch_size: 32,
            mask_threshold: crate::preprocess::DEFAULT_THRESHOLD,
        }
    }
}

/// Scores of one slot offset (or their average).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SlotMetrics {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub dba: f64,
    pub loss: f64,
}

impl SlotMetrics {
    fn fields(&self) -> [f64; 5] {
        [self.top1, self.top3, self.top5, self.dba, self.loss]
    }

    fn from_fields(f: [f64; 5]) -> Self {
        Self {
            top1: f[0],
            top3: f[1],
            top5: f[2],
            dba: f[3],
            loss: f[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Slot offsets `0..=J`.
    pub per_slot: Vec<SlotMetrics>,
    /// Mean over slots: ATop-1/3/5, ADBA and mean loss.
    pub average: SlotMetrics,
    pub samples: usize,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slot,top1,top3,top5,dba,loss\n");
        let row = |s: &mut String, name: &str, m: &SlotMetrics| {
            s.push_str(name);
            for v in m.fields() {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        };
        for (i, m) in self.per_slot.iter().enumerate() {
            row(&mut s, &i.to_string(), m);
        }
        row(&mut s, "avg", &self.average);
        s
    }

    /// Whitespace-separated columns `offset top1 top3 top5 dba`, one line per slot.
    pub fn plot_data(&self) -> String {
        let mut s = String::from("# offset top1 top3 top5 dba\n");
        for (i, m) in self.per_slot.iter().enumerate() {
            s.push_str(&format!("{i} {} {} {} {}\n", m.top1, m.top3, m.top5, m.dba));
        }
        s
    }
}

/// Aggregates per-sample predictions against per-sample label windows.
pub fn evaluate_blocks<S: Scalar>(
    blocks: &[LogitsBlock<S>],
    labels: &[Vec<usize>],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    if blocks.is_empty() {
        bail!(Usage, "no samples to evaluate");
    }
    if blocks.len() != labels.len() {
        bail!(Dimension, "{} predictions for {} label windows", blocks.len(), labels.len());
    }
    let slots = blocks[0].slots();
    let classes = blocks[0].classes();
    let ks = cfg.top_ks.map(|k| k.min(classes));
    let dba_k = cfg.dba_k.min(classes);
    let gamma = S::of(cfg.gamma);
    let mut sums = vec![[0.0f64; 5]; slots];
    for (block, window) in blocks.iter().zip(labels) {
        if block.slots() != slots || block.classes() != classes || window.len() != slots {
            bail!(Dimension, "inconsistent prediction or label shapes");
        }
        for (slot, &truth) in window.iter().enumerate() {
            let p = block.probs_row(slot);
            let acc = &mut sums[slot];
            for (j, &k) in ks.iter().enumerate() {
                acc[j] += f64::from(u8::from(top_k_hit(p, truth, k)?));
            }
            acc[3] += dba_score(p, truth, dba_k, cfg.dba_delta)?;
            acc[4] += crate::loss::focal_loss(block.logits_row(slot), truth, gamma)?.f64();
        }
    }
    let n = blocks.len() as f64;
    let per_slot: Vec<SlotMetrics> = sums.iter().map(|s| SlotMetrics::from_fields(s.map(|v| v / n))).collect();
    let mut avg = [0.0; 5];
    for m in &per_slot {
        avg.iter_mut().zip(m.fields()).for_each(|(a, v)| *a += v);
    }
    Ok(MetricsReport {
        average: SlotMetrics::from_fields(avg.map(|v| v / slots as f64)),
        per_slot,
        samples: blocks.len(),
    })
}

/// Runs eval-mode inference on `timestamps` and scores it.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    ds: &Dataset,
    timestamps: &[usize],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    params.config().check_dataset(ds.meta())?;
    if timestamps.is_empty() {
        bail!(Usage, "no samples to evaluate");
    }
    let stream = PreprocessedStream::new(ds, cfg.mask_threshold)?;
    let mut blocks = Vec::with_capacity(timestamps.len());
    for chunk in timestamps.chunks(cfg.batch_size.max(1)) {
        blocks.extend(params.predict(assemble_batch(&stream, chunk, params.config())?)?);
    }
    let labels: Vec<Vec<usize>> = timestamps.iter().map(|&t| ds.label_window(t)).collect();
    evaluate_blocks(&blocks, &labels, cfg)
}

/// Scores a predictor that puts logit 1 on the true beam and 0 elsewhere.
pub fn evaluate_oracle_probe(ds: &Dataset, timestamps: &[usize], cfg: &MetricsConfig) -> Result<MetricsReport> {
    let c = ds.meta().codebook_size;
    let labels: Vec<Vec<usize>> = timestamps.iter().map(|&t| ds.label_window(t)).collect();
    let blocks = labels
        .iter()
        .map(|w| {
            let mut logits = vec![0.0f64; w.len() * c];
            w.iter().enumerate().for_each(|(s, &b)| logits[s * c + b] = 1.0);
            LogitsBlock::new(w.len(), c, logits)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_blocks(&blocks, &labels, cfg)
}
