//! Adjacent-frame subtraction with motion masks.
//!
//! Each frame is replaced by itself multiplied by the mask of pixels that
//! changed since the previous frame. Static background and clutter vanish
//! while the moving UE keeps its appearance. The first frame of a sequence
//! has no predecessor and maps to zeros, keeping the sequence length fixed.

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::scene::{Dataset, DatasetMeta};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

fn frame_dims<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref other => bail!(Dimension, "expected a [channels, height, width] frame, got {:?}", other),
    }
}

/// Elementwise `|cur - prev|`.
pub fn frame_difference<S: Scalar>(prev: &Tensor<S>, cur: &Tensor<S>) -> Result<Tensor<S>> {
    if prev.shape() != cur.shape() {
        bail!(Dimension, "frame shapes {:?} and {:?} differ", prev.shape(), cur.shape());
    }
    frame_dims(cur)?;
    let data = prev.data().iter().zip(cur.data()).map(|(&a, &b)| (b - a).abs()).collect();
    Tensor::new(cur.shape().to_vec(), data)
}

/// Row-major `height x width` mask: a pixel is on when any channel of `diff`
/// exceeds `threshold`.
pub fn motion_mask<S: Scalar>(diff: &Tensor<S>, threshold: f64) -> Result<Vec<bool>> {
    let (c, h, w) = frame_dims(diff)?;
    let thr = S::of(threshold);
    let plane = h * w;
    Ok((0..plane)
        .map(|p| (0..c).any(|ch| diff.data()[ch * plane + p] > thr))
        .collect())
}

/// Masked frame from raw channel-major slices; writes into `out`.
pub(crate) fn masked_frame_into<S: Scalar>(
    prev: &[f32],
    cur: &[f32],
    channels: usize,
    plane: usize,
    threshold: f32,
    out: &mut [S],
) {
    for p in 0..plane {
        let moving = (0..channels).any(|c| (cur[c * plane + p] - prev[c * plane + p]).abs() > threshold);
        for c in 0..channels {
            out[c * plane + p] = if moving { S::of(cur[c * plane + p] as f64) } else { S::zero() };
        }
    }
}

/// Applies the motion-mask preprocessing to a sequence of frames.
pub fn preprocess_sequence<S: Scalar>(frames: &[Tensor<S>], threshold: f64) -> Result<Vec<Tensor<S>>> {
    let Some(first) = frames.first() else {
        bail!(Usage, "cannot preprocess an empty sequence");
    };
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(Config, "mask threshold must lie in (0, 1), got {}", threshold);
    }
    frame_dims(first)?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, cur) in frames.iter().enumerate() {
        let prev = if i == 0 { cur } else { &frames[i - 1] };
        let mask = motion_mask(&frame_difference(prev, cur)?, threshold)?;
        let plane = mask.len();
        let data = cur
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| if mask[k % plane] { v } else { S::zero() })
            .collect();
        out.push(Tensor::new(cur.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Masked frames of a whole dataset stream, computed once.
///
/// Entry `t` holds `mask(|Z[t] - Z[t-1]|) * Z[t]`; a sample window starting at
/// `t - L` zeroes its first frame instead, matching [`preprocess_sequence`]
/// applied to that window.
#[derive(Debug, Clone)]
pub struct PreprocessedStream<S> {
    meta: DatasetMeta,
    data: Vec<S>,
}

impl<S: Scalar> PreprocessedStream<S> {
    pub fn new(ds: &Dataset, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            bail!(Config, "mask threshold must lie in (0, 1), got {}", threshold);
        }
        let m = ds.meta();
        let len = m.frame_len();
        let plane = m.height * m.width;
        let mut data = vec![S::zero(); m.frames_total * len];
        for t in 1..m.frames_total {
            masked_frame_into(
                ds.frame(t - 1),
                ds.frame(t),
                m.channels,
                plane,
                threshold as f32,
                &mut data[t * len..(t + 1) * len],
            );
        }
        Ok(Self { meta: *m, data })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Preprocessed frame `t` as if it followed frame `t - 1` in a window.
    pub fn frame(&self, t: usize) -> &[S] {
        let len = self.meta.frame_len();
        &self.data[t * len..(t + 1) * len]
    }

    /// The `L + 1` preprocessed frames of the window ending at `t`; the first is zero.
    pub fn window(&self, t: usize) -> Result<Vec<Tensor<S>>> {
        if !self.meta.timestamps().contains(&t) {
            bail!(Index, "timestamp {} has no full window (valid {:?})", t, self.meta.timestamps());
        }
        let shape = vec![self.meta.channels, self.meta.height, self.meta.width];
        let mut out = vec![Tensor::zeros(&shape)];
        for s in t + 1 - self.meta.history..=t {
            out.push(Tensor::new(shape.clone(), self.frame(s).to_vec())?);
        }
        Ok(out)
    }
}
