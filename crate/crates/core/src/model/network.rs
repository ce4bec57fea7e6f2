//! Forward pass of the beam tracker, recorded on a [`Tape`].
//!
//! Batches are laid out sample-major: frame `s` of sample `b` is row
//! `b * (L + 1) + s` of every per-frame matrix.

use super::config::{EmbedPool, ModelConfig, CNN_LAYERS};
use super::logits::LogitsBlock;
use super::params::ModelParams;
use crate::error::{bail, Result};
use crate::preprocess::PreprocessedStream;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, BatchNormState, BatchStats, Tape, Tensor, Var};

/// Embedding CNN: five conv/batch-norm stages and the map to `embed_dim`.
#[derive(Debug, Clone, Copy)]
pub struct CnnVars {
    pub kernels: [Var; CNN_LAYERS],
    pub gamma: [Var; CNN_LAYERS],
    pub beta: [Var; CNN_LAYERS],
    pub embed_w: Var,
    pub embed_b: Var,
}

/// GRU gates; `w_*` act on the input, `u_*` on the previous state.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// Query/key/value/output projections, heads stacked along the columns.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

/// Shared hidden layer and the `J + 1` stacked output heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_fuse: Var,
    pub b_fuse: Var,
    pub w_heads: Var,
    pub b_heads: Var,
}

/// Parameters recorded as tape leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub cnn: CnnVars,
    pub gru: GruVars,
    pub mha: Option<MhaVars>,
    pub head: HeadVars,
    /// Every leaf, in canonical parameter order.
    pub all: Vec<Var>,
}

impl<S: Scalar> ModelParams<S> {
    /// Records every parameter as a leaf; `track` decides whether they collect gradients.
    pub fn bind(&self, tape: &mut Tape<S>, track: bool) -> BoundParams {
        let all: Vec<Var> = self
            .tensors()
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter layout and binding agree");
        let mut kernels = Vec::new();
        let mut gamma = Vec::new();
        let mut beta = Vec::new();
        for _ in 0..CNN_LAYERS {
            kernels.push(next());
            gamma.push(next());
            beta.push(next());
        }
        let arr = |v: Vec<Var>| <[Var; CNN_LAYERS]>::try_from(v).expect("five layers");
        let cnn = CnnVars {
            kernels: arr(kernels),
            gamma: arr(gamma),
            beta: arr(beta),
            embed_w: next(),
            embed_b: next(),
        };
        let gru = GruVars {
            w_r: next(),
            u_r: next(),
            b_r: next(),
            w_z: next(),
            u_z: next(),
            b_z: next(),
            w_h: next(),
            u_h: next(),
            b_h: next(),
        };
        let mha = self.config().mha.then(|| MhaVars {
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
        });
        let head = HeadVars {
            w_fuse: next(),
            b_fuse: next(),
            w_heads: next(),
            b_heads: next(),
        };
        BoundParams {
            cnn,
            gru,
            mha,
            head,
            all,
        }
    }
}

fn affine<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_bias(xw, b)
}

/// Embeds a batch of frames `[n, 3, h, w]` (spatial dims multiples of 32) into `[n, embed_dim]`.
///
/// Each stage is conv 3x3 (stride 1, pad 1) -> batch norm -> relu -> max pool 2x2/2.
/// Train mode also returns each stage's batch statistics.
pub fn cnn_embed<S: Scalar>(
    tape: &mut Tape<S>,
    cnn: &CnnVars,
    bn: &[BatchNormState<S>],
    x: Var,
    mode: BatchNormMode,
    pool: EmbedPool,
) -> Result<(Var, Vec<BatchStats<S>>)> {
    let &[n, _, h, w] = tape.shape(x) else {
        bail!(Dimension, "cnn input must be [n, 3, h, w], got {:?}", tape.shape(x));
    };
    let m = super::config::SPATIAL_MULTIPLE;
    if h % m != 0 || w % m != 0 {
        bail!(Dimension, "cnn input {}x{} is not a multiple of {}", h, w, m);
    }
    if bn.len() != CNN_LAYERS {
        bail!(Dimension, "expected {} batch-norm states, got {}", CNN_LAYERS, bn.len());
    }
    let mut y = x;
    let mut stats = Vec::new();
    for i in 0..CNN_LAYERS {
        let c = tape.conv2d(y, cnn.kernels[i], 1, 1)?;
        let (b, s) = tape.batchnorm2d(c, cnn.gamma[i], cnn.beta[i], &bn[i], mode)?;
        stats.extend(s);
        let r = tape.relu(b);
        y = tape.maxpool2d(r, 2, 2)?;
    }
    let [_, c5, h5, w5] = *tape.shape(y) else { unreachable!("maxpool keeps rank") };
    let flat = match pool {
        EmbedPool::Flatten => tape.reshape(y, vec![n, c5 * h5 * w5])?,
        EmbedPool::Average => {
            let cells = tape.reshape(y, vec![n * c5 * h5 * w5, 1])?;
            let avg = tape.mean_groups(cells, h5 * w5)?;
            tape.reshape(avg, vec![n, c5])?
        }
    };
    Ok((affine(tape, flat, cnn.embed_w, cnn.embed_b)?, stats))
}

/// `r = σ(x W_r + h U_r + b_r)`, `u = σ(x W_z + h U_z + b_z)`,
/// `ĥ = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = (1 - u) ⊙ h + u ⊙ ĥ`.
///
/// `x` is `[batch, embed_dim]`, `h` is `[batch, gru_hidden]`.
pub fn gru_step<S: Scalar>(tape: &mut Tape<S>, g: &GruVars, x: Var, h: Var) -> Result<Var> {
    let xr = affine(tape, x, g.w_r, g.b_r)?;
    let xz = affine(tape, x, g.w_z, g.b_z)?;
    let xh = affine(tape, x, g.w_h, g.b_h)?;
    gru_update(tape, g, [xr, xz, xh], h)
}

/// GRU step from input projections that already include the biases.
fn gru_update<S: Scalar>(tape: &mut Tape<S>, g: &GruVars, [xr, xz, xh]: [Var; 3], h: Var) -> Result<Var> {
    if tape.shape(h).len() != 2 || tape.shape(h)[0] != tape.shape(xr)[0] {
        bail!(Dimension, "gru state {:?} does not match input rows {:?}", tape.shape(h), tape.shape(xr));
    }
    let hr = tape.matmul(h, g.u_r)?;
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);
    let hz = tape.matmul(h, g.u_z)?;
    let z_pre = tape.add(xz, hz)?;
    let u = tape.sigmoid(z_pre);
    let rh = tape.mul(r, h)?;
    let rhu = tape.matmul(rh, g.u_h)?;
    let c_pre = tape.add(xh, rhu)?;
    let cand = tape.tanh(c_pre);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(u, delta)?;
    tape.add(h, step)
}

/// Runs the GRU from a zero state over `features` `[batch * seq, embed_dim]`.
///
/// Returns all hidden states `[batch * seq, gru_hidden]` and the final state `[batch, gru_hidden]`.
pub fn encode_sequence<S: Scalar>(tape: &mut Tape<S>, g: &GruVars, features: Var, seq: usize) -> Result<(Var, Var)> {
    let &[rows, _] = tape.shape(features) else {
        bail!(Dimension, "features must be a matrix, got {:?}", tape.shape(features));
    };
    if seq == 0 || rows == 0 || rows % seq != 0 {
        bail!(Dimension, "{} feature rows do not split into sequences of {}", rows, seq);
    }
    let batch = rows / seq;
    let hidden = tape.shape(g.u_r)[0];
    let xr = affine(tape, features, g.w_r, g.b_r)?;
    let xz = affine(tape, features, g.w_z, g.b_z)?;
    let xh = affine(tape, features, g.w_h, g.b_h)?;
    let mut h = tape.leaf(Tensor::zeros(&[batch, hidden]));
    let mut states = Vec::with_capacity(seq);
    for s in 0..seq {
        let rows: Vec<usize> = (0..batch).map(|b| b * seq + s).collect();
        let proj = [
            tape.gather_rows(xr, &rows)?,
            tape.gather_rows(xz, &rows)?,
            tape.gather_rows(xh, &rows)?,
        ];
        h = gru_update(tape, g, proj, h)?;
        states.push(h);
    }
    let wide = tape.concat_cols(&states)?;
    let all = tape.reshape(wide, vec![batch * seq, hidden])?;
    Ok((all, h))
}

/// `hidden + OutProj(MultiHead(hidden))` with self-attention inside each sequence.
pub fn mha_residual<S: Scalar>(tape: &mut Tape<S>, m: &MhaVars, hidden: Var, seq: usize, heads: usize) -> Result<Var> {
    let q = affine(tape, hidden, m.w_q, m.b_q)?;
    let k = affine(tape, hidden, m.w_k, m.b_k)?;
    let v = affine(tape, hidden, m.w_v, m.b_v)?;
    let att = tape.attention(q, k, v, seq, heads)?;
    let out = affine(tape, att, m.w_o, m.b_o)?;
    tape.add(hidden, out)
}

/// Fuses `[mean(attended), context, current]`, applies the shared relu layer
/// and the stacked heads. Returns logits `[batch * slots, codebook]`.
pub fn predict_logits<S: Scalar>(
    tape: &mut Tape<S>,
    head: &HeadVars,
    attended: Var,
    context: Var,
    current: Var,
    seq: usize,
    slots: usize,
) -> Result<Var> {
    let pooled = tape.mean_groups(attended, seq)?;
    let fused = tape.concat_cols(&[pooled, context, current])?;
    let pre = affine(tape, fused, head.w_fuse, head.b_fuse)?;
    let hid = tape.relu(pre);
    let out = affine(tape, hid, head.w_heads, head.b_heads)?;
    let &[batch, width] = tape.shape(out) else { unreachable!("affine output is a matrix") };
    if slots == 0 || width % slots != 0 {
        bail!(Dimension, "head width {} does not split into {} slots", width, slots);
    }
    tape.reshape(out, vec![batch * slots, width / slots])
}

/// Output of [`ModelParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    /// `[batch * (J + 1), C]`, sample-major.
    pub logits: Var,
    pub batch: usize,
    /// Per-stage batch statistics (train mode only).
    pub bn_stats: Vec<BatchStats<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Full forward pass over `frames` `[batch * (L + 1), 3, H, W]` of padded,
    /// preprocessed frames.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        frames: Var,
        mode: BatchNormMode,
    ) -> Result<ForwardPass<S>> {
        let cfg = self.config();
        let seq = cfg.seq_len();
        let (ph, pw) = cfg.padded_dims();
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 4 || shape[1..] != [crate::scene::CHANNELS, ph, pw] || shape[0] % seq != 0 || shape[0] == 0 {
            bail!(
                Dimension,
                "forward expects [batch * {}, {}, {}, {}] frames, got {:?}",
                seq,
                crate::scene::CHANNELS,
                ph,
                pw,
                shape
            );
        }
        let batch = shape[0] / seq;
        let (features, bn_stats) = cnn_embed(tape, &bound.cnn, self.bn_states(), frames, mode, cfg.embed_pool)?;
        let (hidden, context) = encode_sequence(tape, &bound.gru, features, seq)?;
        let attended = match &bound.mha {
            Some(m) => mha_residual(tape, m, hidden, seq, cfg.mha_heads)?,
            None => hidden,
        };
        let current_rows: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
        let current = tape.gather_rows(features, &current_rows)?;
        let logits = predict_logits(tape, &bound.head, attended, context, current, seq, cfg.slots())?;
        Ok(ForwardPass {
            logits,
            batch,
            bn_stats,
        })
    }

    /// Eval-mode inference without gradient tracking; one block per sample.
    pub fn predict(&self, frames: Tensor<S>) -> Result<Vec<LogitsBlock<S>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf(frames);
        let pass = self.forward(&mut tape, &bound, x, BatchNormMode::Eval)?;
        logits_blocks(tape.value(pass.logits), self.config().slots())
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_bn(&mut self, stats: &[BatchStats<S>]) -> Result<()> {
        if stats.len() != CNN_LAYERS {
            bail!(Dimension, "expected {} batch statistics, got {}", CNN_LAYERS, stats.len());
        }
        self.bn_states_mut().iter_mut().zip(stats).for_each(|(s, b)| s.update(b));
        Ok(())
    }
}

/// Splits `[batch * slots, C]` logits into per-sample blocks.
pub fn logits_blocks<S: Scalar>(logits: &Tensor<S>, slots: usize) -> Result<Vec<LogitsBlock<S>>> {
    let &[rows, classes] = logits.shape() else {
        bail!(Dimension, "logits must be a matrix, got {:?}", logits.shape());
    };
    if slots == 0 || rows % slots != 0 {
        bail!(Dimension, "{} logit rows do not split into {} slots", rows, slots);
    }
    logits
        .data()
        .chunks(slots * classes)
        .map(|c| LogitsBlock::new(slots, classes, c.to_vec()))
        .collect()
}

/// Copies `frame` (`[c, h, w]`, channel-major) into the centre of a zeroed `[c, ph, pw]` buffer.
pub fn pad_frame<S: Scalar>(frame: &[S], c: usize, h: usize, w: usize, ph: usize, pw: usize, out: &mut [S]) {
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    out.iter_mut().for_each(|v| *v = S::zero());
    for ch in 0..c {
        for i in 0..h {
            let src = &frame[(ch * h + i) * w..(ch * h + i + 1) * w];
            let start = (ch * ph + top + i) * pw + left;
            out[start..start + w].copy_from_slice(src);
        }
    }
}

/// Stacks the padded, preprocessed windows ending at `timestamps` into `[batch * (L + 1), 3, H, W]`.
pub fn assemble_batch<S: Scalar>(
    stream: &PreprocessedStream<S>,
    timestamps: &[usize],
    cfg: &ModelConfig,
) -> Result<Tensor<S>> {
    let meta = stream.meta();
    cfg.check_dataset(meta)?;
    if timestamps.is_empty() {
        bail!(Usage, "cannot assemble an empty batch");
    }
    let (c, h, w) = (meta.channels, meta.height, meta.width);
    let (ph, pw) = cfg.padded_dims();
    let padded = c * ph * pw;
    let seq = cfg.seq_len();
    let mut data = vec![S::zero(); timestamps.len() * seq * padded];
    for (b, &t) in timestamps.iter().enumerate() {
        if !meta.timestamps().contains(&t) {
            bail!(Index, "timestamp {} has no full window (valid {:?})", t, meta.timestamps());
        }
        // slot 0 of every window stays zero: its predecessor is outside the window
        for s in 1..seq {
            let frame = stream.frame(t + s + 1 - seq);
            let dst = &mut data[(b * seq + s) * padded..(b * seq + s + 1) * padded];
            if (ph, pw) == (h, w) {
                dst.copy_from_slice(frame);
            } else {
                pad_frame(frame, c, h, w, ph, pw, dst);
            }
        }
    }
    Tensor::new(vec![timestamps.len() * seq, c, ph, pw], data)
}
