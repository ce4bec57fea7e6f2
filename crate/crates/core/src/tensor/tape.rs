use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{bail, Result};
use crate::scalar::{gemm_slices, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<S> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub eps: S,
    pub momentum: S,
    /// Number of train-mode batches folded into the running statistics.
    pub tracked: u64,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            eps: S::of(1e-5),
            momentum: S::of(0.1),
            tracked: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.tracked > 0
    }

    /// Exponential moving average update from one batch's statistics.
    pub fn update(&mut self, stats: &BatchStats<S>) {
        let m = self.momentum;
        let keep = S::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + m * b;
        }
        self.tracked += 1;
    }
}

/// Per-channel statistics observed by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var_unbiased: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, S),
    Act(Var, Activation),
    Softmax(Var),
    Reshape(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    MeanGroups(Var, usize),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // normalized input and per-channel 1/sqrt(var + eps)
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    FocalLoss {
        logits: Var,
        // d loss / d logits, computed alongside the forward pass
        dlogits: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so every node's inputs precede it.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// `backward` fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[S] {
        self.nodes[var.0].value.data()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Gradient of a tracked leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&[S]> {
        self.nodes[var.0].value.grad()
    }

    /// Removes a leaf's tensor (with gradient, if any) from the tape.
    pub fn take(&mut self, var: Var) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::scalar(S::zero()))
    }

    /// Attention probabilities `[groups, heads, seq, seq]` recorded by an attention node.
    pub fn attention_probs(&self, var: Var) -> Option<&[S]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, var: Var) -> Result<(usize, usize)> {
        match self.shape(var) {
            [m, n] => Ok((*m, *n)),
            other => bail!(Dimension, "expected a matrix, got shape {:?}", other),
        }
    }

    fn rows_cols(&self, var: Var) -> (usize, usize) {
        let shape = self.shape(var);
        let cols = shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.value(var).numel() / cols };
        (rows, cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            bail!(Dimension, "matmul inner dimensions differ: {}x{} by {}x{}", m, k, k2, n);
        }
        let mut out = vec![S::zero(); m * n];
        gemm_slices(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{} of shapes {:?} and {:?}", what, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let out: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.shape(bias) != [cols] {
            bail!(Dimension, "bias {:?} does not match row width {}", self.shape(bias), cols);
        }
        let b = self.data(bias);
        let out: Vec<S> = self
            .data(x)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRowBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out: Vec<S> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), needs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(S) -> S = match kind {
            Activation::Relu => |v| if v > S::zero() { v } else { S::zero() },
            Activation::Sigmoid => |v| S::one() / (S::one() + (-v).exp()),
            Activation::Tanh => |v| v.tanh(),
        };
        let out: Vec<S> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Act(x, kind), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|v| v.is_nan()) {
            bail!(Numeric, "softmax input contains NaN");
        }
        let (_, cols) = self.rows_cols(x);
        let mut out = self.data(x).to_vec();
        out.chunks_mut(cols.max(1)).for_each(kernels::softmax_in_place);
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let value = Tensor::from_parts(value.shape().to_vec(), value.into_data());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            bail!(Index, "row {} out of range for {} rows", bad, m);
        }
        let src = self.data(x);
        let out: Vec<S> = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::GatherRows(x, rows.to_vec()),
            needs,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Usage, "concat_cols needs at least one input");
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, n) = self.matrix_dims(p)?;
            if *rows.get_or_insert(m) != m {
                bail!(Dimension, "concat_cols row counts differ");
            }
            widths.push(n);
        }
        let m = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Averages consecutive blocks of `group` rows: `[g * group, n] -> [g, n]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x)?;
        if group == 0 || m % group != 0 {
            bail!(Dimension, "{} rows do not split into groups of {}", m, group);
        }
        let g = m / group;
        let inv = S::one() / S::of(group as f64);
        let src = self.data(x);
        let mut out = vec![S::zero(); g * n];
        for (r, row) in src.chunks(n).enumerate() {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            dst.iter_mut().zip(row).for_each(|(d, v)| *d += *v * inv);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![g, n], out), Op::MeanGroups(x, group), needs))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x` is `[c_in, h, w]` or batched `[n, c_in, h, w]`; `k` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batched, n, cin, h, w) = match *self.shape(x) {
            [c, h, w] => (false, 1, c, h, w),
            [n, c, h, w] => (true, n, c, h, w),
            ref other => bail!(Dimension, "conv2d input must be rank 3 or 4, got {:?}", other),
        };
        let [cout, kcin, kh, kw] = *self.shape(k) else {
            bail!(Dimension, "conv2d kernel must be rank 4, got {:?}", self.shape(k));
        };
        if kcin != cin {
            bail!(Dimension, "kernel expects {} input channels, input has {}", kcin, cin);
        }
        if stride == 0 {
            bail!(Dimension, "conv2d stride must be at least 1");
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_output_len(h, kh, stride, pad),
            kernels::conv_output_len(w, kw, stride, pad),
        ) else {
            bail!(Dimension, "kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad);
        };
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(k), &geom);
        let shape = if batched { vec![n, cout, ho, wo] } else { vec![cout, ho, wo] };
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, k, geom }, needs))
    }

    /// Max pooling over the last two dimensions of a rank-3 or rank-4 tensor.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 || shape.len() > 4 {
            bail!(Dimension, "maxpool2d input must be rank 3 or 4, got {:?}", shape);
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (Some(ho), Some(wo)) = (
            kernels::pool_output_len(h, window, stride),
            kernels::pool_output_len(w, window, stride),
        ) else {
            bail!(Dimension, "pool window {} exceeds input {}x{} (stride {})", window, h, w, stride);
        };
        let planes = shape[..shape.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool_forward(self.data(x), planes, h, w, window, stride, ho, wo);
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([ho, wo]);
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MaxPool { x, argmax }, needs))
    }

    /// Batch normalization over `[n, c, h, w]` (rank 2 `[n, c]` is accepted too).
    ///
    /// Train mode normalizes with the batch statistics and returns them so the
    /// caller can fold them into `state`; eval mode uses `state`'s running
    /// statistics and fails if none were ever recorded.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<S>,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            bail!(Dimension, "batchnorm input must have a channel axis, got {:?}", shape);
        }
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            bail!(Dimension, "batchnorm affine/state sizes do not match {} channels", c);
        }
        if state.eps <= S::zero() {
            bail!(Domain, "batchnorm eps must be positive");
        }
        let (mean, inv_std, stats) = match mode {
            BatchNormMode::Train => {
                let count = n * hw;
                if count < 2 {
                    bail!(Dimension, "train-mode batchnorm needs more than one value per channel");
                }
                let (mean, var) = kernels::channel_moments(self.data(x), n, c, hw);
                let eps = state.eps.f64();
                let inv_std: Vec<S> = var.iter().map(|v| S::of(1.0 / (v + eps).sqrt())).collect();
                let stats = BatchStats {
                    mean: mean.iter().map(|&m| S::of(m)).collect(),
                    var_unbiased: var
                        .iter()
                        .map(|&v| S::of(v * count as f64 / (count - 1) as f64))
                        .collect(),
                };
                (stats.mean.clone(), inv_std, Some(stats))
            }
            BatchNormMode::Eval => {
                if !state.is_initialized() {
                    bail!(State, "batchnorm evaluated before any training step recorded running statistics");
                }
                let inv_std = state.running_var.iter().map(|&v| S::one() / (v + state.eps).sqrt()).collect();
                (state.running_mean.clone(), inv_std, None)
            }
        };
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![S::zero(); xs.len()];
        let mut out = vec![S::zero(); xs.len()];
        for bi in 0..n {
            for ch in 0..c {
                let start = (bi * c + ch) * hw;
                for i in start..start + hw {
                    let v = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = v;
                    out[i] = g[ch] * v + b[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BatchNormMode::Train,
            },
            needs,
        );
        Ok((var, stats))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[groups * seq, dim]` with each group's `seq` rows
    /// contiguous; heads take equal contiguous column blocks of `dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (m, dim) = self.matrix_dims(q)?;
        if self.shape(k) != [m, dim] || self.shape(v) != [m, dim] {
            bail!(Dimension, "attention q/k/v shapes differ");
        }
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "width {} is not divisible by {} heads", dim, heads);
        }
        if seq == 0 || m % seq != 0 {
            bail!(Dimension, "{} rows do not split into sequences of {}", m, seq);
        }
        let (out, probs) =
            kernels::attention_forward(self.data(q), self.data(k), self.data(v), m / seq, seq, dim, heads);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::from_parts(vec![m, dim], out),
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Sum over rows of the focal loss `-(1 - p)^gamma * ln p` of each row's
    /// true class. `logits` is `[rows, classes]` (or any shape whose last
    /// dimension is the class axis); `labels` holds one 0-based class per row.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: S) -> Result<Var> {
        let (rows, classes) = self.rows_cols(logits);
        if labels.len() != rows {
            bail!(Dimension, "{} labels for {} logit rows", labels.len(), rows);
        }
        let mut total = S::zero();
        let mut dlogits = vec![S::zero(); rows * classes];
        for (r, &label) in labels.iter().enumerate() {
            let row = &self.data(logits)[r * classes..(r + 1) * classes];
            let (loss, grad) = crate::loss::focal_row(row, label, gamma)?;
            total += loss;
            dlogits[r * classes..(r + 1) * classes].copy_from_slice(&grad);
        }
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(total), Op::FocalLoss { logits, dlogits }, needs))
    }

    /// Reverse pass from a scalar output. Fills the gradient of every leaf
    /// created with `requires_grad`; the tape cannot be replayed afterwards.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            bail!(State, "backward already ran on this tape");
        }
        if self.value(output).numel() != 1 {
            bail!(Usage, "backward needs a scalar output, got shape {:?}", self.shape(output));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![S::one()]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.set_grad(g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let mut acc = |var: Var, delta: Vec<S>| {
            if !self.needs(var) {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += *d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_slices(m, n, k, g, false, self.data(*b), true, &mut da, false);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_slices(k, m, n, self.data(*a), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.iter().zip(self.data(*b)).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    acc(*b, g.iter().zip(self.data(*a)).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, g.to_vec());
                if self.needs(*bias) {
                    let cols = self.shape(*bias)[0];
                    let mut db = vec![S::zero(); cols];
                    for row in g.chunks(cols.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Scale(x, factor) => acc(*x, g.iter().map(|&v| v * *factor).collect()),
            Op::Act(x, kind) => {
                let y = node.value.data();
                let dx = match kind {
                    Activation::Relu => self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
                        .collect(),
                    Activation::Sigmoid => y.iter().zip(g).map(|(&s, &d)| d * s * (S::one() - s)).collect(),
                    Activation::Tanh => y.iter().zip(g).map(|(&t, &d)| d * (S::one() - t * t)).collect(),
                };
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let (_, cols) = self.rows_cols(*x);
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols.max(1)).zip(g.chunks(cols.max(1))) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::GatherRows(x, rows) => {
                let n = self.shape(*x)[1];
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (out_r, &src_r) in rows.iter().enumerate() {
                    dx[src_r * n..(src_r + 1) * n]
                        .iter_mut()
                        .zip(&g[out_r * n..(out_r + 1) * n])
                        .for_each(|(d, v)| *d += *v);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::MeanGroups(x, group) => {
                let n = self.shape(*x)[1];
                let inv = S::one() / S::of(*group as f64);
                let rows = self.shape(*x)[0];
                let mut dx = Vec::with_capacity(rows * n);
                for r in 0..rows {
                    let src = &g[(r / group) * n..(r / group + 1) * n];
                    dx.extend(src.iter().map(|&v| v * inv));
                }
                acc(*x, dx);
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*k),
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*k),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dk) = dk {
                    acc(*k, dk);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let start = (bi * c + ch) * hw;
                        for i in start..start + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.data(*gamma);
                    let mut dx = vec![S::zero(); g.len()];
                    let count = S::of((n * hw) as f64);
                    for bi in 0..n {
                        for ch in 0..c {
                            let start = (bi * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for i in start..start + hw {
                                dx[i] = if *train {
                                    scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (m, dim) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (dq, dk, dv) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    m / seq,
                    *seq,
                    dim,
                    *heads,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::FocalLoss { logits, dlogits } => {
                acc(*logits, dlogits.iter().map(|&d| d * g[0]).collect());
            }
        }
    }
}
