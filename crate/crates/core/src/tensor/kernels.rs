//! Slice-level forward/backward kernels behind the tape operations.

use rayon::prelude::*;

use crate::scalar::{gemm_slices, Scalar};

/// Output length of a strided, padded sliding window: `floor((n + 2 pad - k) / stride) + 1`.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of an unpadded pooling window.
pub fn pool_output_len(n: usize, window: usize, stride: usize) -> Option<usize> {
    conv_output_len(n, window, stride, 0)
}

// Fixed sample chunking for parameter-gradient reductions. The partial sums
// are combined in chunk order, so results do not depend on the thread count.
const REDUCE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `oj * stride + kj - pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kj {
            (self.w + self.pad - kj).div_ceil(self.stride).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Input row read by output row `oi` at kernel row `ki`, if inside the image.
    fn input_row(&self, oi: usize, ki: usize) -> Option<usize> {
        (oi * self.stride + ki).checked_sub(self.pad).filter(|&r| r < self.h)
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let span = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * span..(row + 1) * span];
                let (lo, hi) = g.valid_cols(kj);
                for oi in 0..g.ho {
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    let Some(ii) = g.input_row(oi, ki) else {
                        out_row.fill(S::zero());
                        continue;
                    };
                    let src = &plane[ii * g.w..(ii + 1) * g.w];
                    out_row[..lo].fill(S::zero());
                    out_row[hi..].fill(S::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let span = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * span..(row + 1) * span];
                let (lo, hi) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                for oi in 0..g.ho {
                    let Some(ii) = g.input_row(oi, ki) else { continue };
                    let dst = &mut plane[ii * g.w..(ii + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    let from = &src[oi * g.wo + lo..oi * g.wo + hi];
                    if g.stride == 1 {
                        dst[first..first + hi - lo].iter_mut().zip(from).for_each(|(d, &v)| *d += v);
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(from) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let mut out = vec![S::zero(); g.n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each_init(
            || vec![S::zero(); g.col_rows() * g.col_cols()],
            |cols, (yn, xn)| {
                im2col(xn, g, cols);
                gemm_slices(g.cout, g.col_rows(), g.col_cols(), k, false, cols, false, yn, false);
            },
        );
    out
}

/// Returns `(dx, dk)`; each is computed only when requested.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    k: &[S],
    dy: &[S],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let dx = need_dx.then(|| {
        let mut dx = vec![S::zero(); g.n * g.in_len()];
        dx.par_chunks_mut(g.in_len())
            .zip(dy.par_chunks(g.out_len()))
            .for_each_init(
                || vec![S::zero(); g.col_rows() * g.col_cols()],
                |dcols, (dxn, dyn_)| {
                    gemm_slices(g.col_rows(), g.cout, g.col_cols(), k, true, dyn_, false, dcols, false);
                    col2im(dcols, g, dxn);
                },
            );
        dx
    });
    let dk = need_dk.then(|| {
        let klen = g.cout * g.col_rows();
        let partials: Vec<Vec<S>> = x
            .par_chunks(g.in_len() * REDUCE_CHUNK)
            .zip(dy.par_chunks(g.out_len() * REDUCE_CHUNK))
            .map(|(xc, dyc)| {
                let mut acc = vec![S::zero(); klen];
                let mut cols = vec![S::zero(); g.col_rows() * g.col_cols()];
                for (xn, dyn_) in xc.chunks(g.in_len()).zip(dyc.chunks(g.out_len())) {
                    im2col(xn, g, &mut cols);
                    gemm_slices(g.cout, g.col_cols(), g.col_rows(), dyn_, false, &cols, true, &mut acc, true);
                }
                acc
            })
            .collect();
        sum_partials(partials, klen)
    });
    (dx, dk)
}

fn sum_partials<S: Scalar>(partials: Vec<Vec<S>>, len: usize) -> Vec<S> {
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![S::zero(); len]);
    for p in iter {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += *v);
    }
    total
}

/// Max pooling over `[planes, h, w]`. Returns outputs and the flat input index
/// of each selected element (first row-major maximum on ties).
pub(crate) fn maxpool_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<S>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        let plane = &x[base..base + h * w];
        for oi in 0..ho {
            let rows = &plane[oi * stride * w..(oi * stride + window - 1) * w + w];
            if window == 2 && stride == 2 {
                let (top, bottom) = rows.split_at(w);
                for (oj, (t, b)) in top.chunks_exact(2).zip(bottom.chunks_exact(2)).take(wo).enumerate() {
                    let mut best = (t[0], 2 * oj);
                    for (v, idx) in [(t[1], 2 * oj + 1), (b[0], w + 2 * oj), (b[1], w + 2 * oj + 1)] {
                        if v > best.0 {
                            best = (v, idx);
                        }
                    }
                    out.push(best.0);
                    arg.push(base + oi * stride * w + best.1);
                }
                continue;
            }
            for oj in 0..wo {
                let col = oj * stride;
                let (mut best, mut best_v) = (col, rows[col]);
                for di in 0..window {
                    for (dj, &v) in rows[di * w + col..di * w + col + window].iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = di * w + col + dj;
                        }
                    }
                }
                out.push(best_v);
                arg.push(base + oi * stride * w + best);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics of `[n, c, hw]` data, accumulated in f64.
pub(crate) fn channel_moments<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            mean[ch] += x[start..start + hw].iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            let m = mean[ch];
            var[ch] += x[start..start + hw]
                .iter()
                .map(|v| {
                    let d = v.f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Scaled dot-product self-attention over groups of `seq` consecutive rows.
///
/// `q`, `k`, `v` are `[groups * seq, dim]`; heads split `dim` into equal
/// contiguous column blocks. Returns the attended rows and the attention
/// probabilities laid out as `[groups, heads, seq, seq]`.
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    groups: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>) {
    let dh = dim / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut out = vec![S::zero(); groups * seq * dim];
    let mut probs = vec![S::zero(); groups * heads * seq * seq];
    for g in 0..groups {
        for h in 0..heads {
            let p = &mut probs[(g * heads + h) * seq * seq..(g * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &q[(g * seq + i) * dim + h * dh..(g * seq + i) * dim + (h + 1) * dh];
                let row = &mut p[i * seq..(i + 1) * seq];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[(g * seq + j) * dim + h * dh..(g * seq + j) * dim + (h + 1) * dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<S>() * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[(g * seq + i) * dim + h * dh..(g * seq + i) * dim + (h + 1) * dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v[(g * seq + j) * dim + h * dh..(g * seq + j) * dim + (h + 1) * dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * *x);
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    groups: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = dim / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); seq];
    let cols = |row: usize, h: usize| row * dim + h * dh..row * dim + (h + 1) * dh;
    for g in 0..groups {
        for h in 0..heads {
            let p = &probs[(g * heads + h) * seq * seq..(g * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let doi = &dout[cols(g * seq + i, h)];
                for j in 0..seq {
                    let vj = &v[cols(g * seq + j, h)];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                    let pij = p[i * seq + j];
                    dv[cols(g * seq + j, h)]
                        .iter_mut()
                        .zip(doi)
                        .for_each(|(d, x)| *d += pij * *x);
                }
                let dot: S = (0..seq).map(|j| dp[j] * p[i * seq + j]).sum();
                for j in 0..seq {
                    let ds = p[i * seq + j] * (dp[j] - dot) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let (qr, kr) = (cols(g * seq + i, h), cols(g * seq + j, h));
                    for t in 0..dh {
                        dq[qr.start + t] += ds * k[kr.start + t];
                        dk[kr.start + t] += ds * q[qr.start + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}
