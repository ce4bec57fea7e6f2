use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, CNN_LAYERS};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
}

/// Name, shape and initializer of every learnable tensor, in canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    let mut cin = crate::scene::CHANNELS;
    for (i, &c) in cfg.cnn_channels.iter().enumerate() {
        push(format!("cnn.{i}.kernel"), vec![c, cin, 3, 3], Init::Uniform(cin * 9));
        push(format!("cnn.{i}.gamma"), vec![c], Init::Ones);
        push(format!("cnn.{i}.beta"), vec![c], Init::Zeros);
        cin = c;
    }
    let (f, e, h) = (cfg.cnn_output_len(), cfg.embed_dim, cfg.gru_hidden);
    push("embed.weight".into(), vec![f, e], Init::Uniform(f));
    push("embed.bias".into(), vec![e], Init::Zeros);
    for gate in ["r", "z", "h"] {
        push(format!("gru.w_{gate}"), vec![e, h], Init::Uniform(e));
        push(format!("gru.u_{gate}"), vec![h, h], Init::Uniform(h));
        push(format!("gru.b_{gate}"), vec![h], Init::Zeros);
    }
    if cfg.mha {
        for proj in ["q", "k", "v", "o"] {
            push(format!("mha.w_{proj}"), vec![h, h], Init::Uniform(h));
            push(format!("mha.b_{proj}"), vec![h], Init::Zeros);
        }
    }
    let (fd, p, out_w) = (cfg.fuse_dim(), cfg.pred_hidden, cfg.slots() * cfg.codebook_size);
    push("pred.w_fuse".into(), vec![fd, p], Init::Uniform(fd));
    push("pred.b_fuse".into(), vec![p], Init::Zeros);
    push("pred.w_heads".into(), vec![p, out_w], Init::Uniform(p));
    push("pred.b_heads".into(), vec![out_w], Init::Zeros);
    out
}

/// All learnable tensors of a network plus its batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    bn: Vec<BatchNormState<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases
    /// and batch-norm shifts zero, batch-norm scales one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| S::of(rng.gen_range(-a..a))).collect()
                }
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        let bn = config.cnn_channels.iter().map(|&c| BatchNormState::new(c)).collect();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            bn,
        })
    }

    /// Assembles a parameter set from named tensors in canonical order.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<S>)>, bn: Vec<BatchNormState<S>>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if named.len() != expected.len() {
            bail!(Dimension, "{} tensors given, network has {}", named.len(), expected.len());
        }
        for ((name, t), (want, shape, _)) in named.iter().zip(&expected) {
            if name != want || t.shape() != shape.as_slice() {
                bail!(Dimension, "tensor {} {:?} does not match expected {} {:?}", name, t.shape(), want, shape);
            }
        }
        if bn.len() != CNN_LAYERS || bn.iter().zip(&config.cnn_channels).any(|(s, &c)| s.channels() != c) {
            bail!(Dimension, "batch-norm statistics do not match the cnn widths");
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
            bn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn bn_states(&self) -> &[BatchNormState<S>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<S>] {
        &mut self.bn
    }

    /// Exact number of learnable scalars (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormState {
                    running_mean: s.running_mean.iter().map(|&v| T::of(v.f64())).collect(),
                    running_var: s.running_var.iter().map(|&v| T::of(v.f64())).collect(),
                    eps: T::of(s.eps.f64()),
                    momentum: T::of(s.momentum.f64()),
                    tracked: s.tracked,
                })
                .collect(),
        }
    }
}

/// Learnable-parameter count of a configuration without allocating it.
pub fn count_params(config: &ModelConfig) -> usize {
    layout(config).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

pub(crate) fn count_tensors(config: &ModelConfig) -> usize {
    layout(config).len()
}
