//! Speech encoder: a strided convolution frontend followed by pre-norm
//! transformer blocks, plus the CTC projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::LogProbLattice;
use crate::error::{Error, Result};
use crate::numerics::nn::{integer_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, Init, ParamStore, Tensor, Var};

const FRONTEND_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub frontend_stride: usize,
    /// Output symbols including the blank.
    pub vocab_size: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            model_dim: 32,
            n_layers: 2,
            n_heads: 2,
            frontend_stride: 2,
            vocab_size: 10,
            ffn_mult: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.frontend_stride == 0 {
            return Err(Error::Config("frontend_stride must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        input_len.div_ceil(self.frontend_stride)
    }
}

/// Encoder output `c`: one row per downsampled frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    pub frames: Tensor,
    pub source_len: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    conv1: Linear,
    conv2: Linear,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let conv1 = Linear::new(
            store,
            &format!("{prefix}.frontend.conv1"),
            FRONTEND_KERNEL * config.input_dim,
            d,
            Init::XavierUniform,
            true,
            rng,
        )?;
        let conv2 = Linear::new(
            store,
            &format!("{prefix}.frontend.conv2"),
            FRONTEND_KERNEL * d,
            d,
            Init::XavierUniform,
            true,
            rng,
        )?;
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, rng)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, d, config.n_heads, rng)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, rng)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d, rng)?;
        Ok(Self {
            config,
            conv1,
            conv2,
            layers,
            final_norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_input(&self, features: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.rows() == 0 {
            return Err(Error::Shape("encoder input must be a non-empty [T, D] matrix".into()));
        }
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} feature channels, got {}",
                self.config.input_dim,
                features.cols()
            )));
        }
        Ok(())
    }

    /// Per-utterance mean removal, then two kernel-3 convolutions; the first
    /// carries the full stride.
    pub fn frontend_graph(&self, g: &mut Graph, features: &Tensor) -> Var {
        let mean = features.mean_rows();
        let mut centered = features.clone();
        for r in 0..centered.rows() {
            for (x, m) in centered.row_mut(r).iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        let out_len = self.config.output_len(features.rows());
        let x = g.input(centered);
        let u = g.unfold(x, FRONTEND_KERNEL, self.config.frontend_stride, 1, out_len);
        let h = self.conv1.forward(g, u);
        let h = g.silu(h);
        let u = g.unfold(h, FRONTEND_KERNEL, 1, 1, out_len);
        let h = self.conv2.forward(g, u);
        g.silu(h)
    }

    /// Content features as a graph value.
    pub fn forward(&self, g: &mut Graph, features: &Tensor) -> Var {
        let mut h = self.frontend_graph(g, features);
        let positions = integer_positions(g.shape(h).0);
        for layer in &self.layers {
            let n = layer.norm1.forward(g, h);
            let a = layer.attn.forward(g, n, n, &positions, &positions);
            h = g.add(h, a);
            let n = layer.norm2.forward(g, h);
            let f = layer.ffn.forward(g, n);
            h = g.add(h, f);
        }
        self.final_norm.forward(g, h)
    }

    pub fn frontend_encode(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        self.check_input(features)?;
        let mut g = Graph::new(store);
        let out = self.frontend_graph(&mut g, features);
        Ok(g.value(out).clone())
    }

    pub fn encode(&self, store: &ParamStore, features: &Tensor) -> Result<ContentFeatures> {
        self.check_input(features)?;
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, features);
        Ok(ContentFeatures {
            frames: g.value(out).clone(),
            source_len: features.rows(),
        })
    }
}

/// Linear projection to `V` logits per frame followed by log-softmax.
#[derive(Clone, Debug)]
pub struct CtcHead {
    proj: Linear,
}

impl CtcHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, model_dim: usize, vocab_size: usize, rng: &mut R) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        Ok(Self {
            proj: Linear::new(store, &format!("{prefix}.proj"), model_dim, vocab_size, Init::XavierUniform, true, rng)?,
        })
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    pub fn forward(&self, g: &mut Graph, content: Var) -> Var {
        let logits = self.proj.forward(g, content);
        g.log_softmax(logits)
    }

    pub fn lattice(&self, store: &ParamStore, content: &ContentFeatures) -> Result<LogProbLattice> {
        if content.frames.cols() != self.proj.in_dim {
            return Err(Error::Shape("content width does not match the CTC head".into()));
        }
        let mut g = Graph::new(store);
        let c = g.input(content.frames.clone());
        let out = self.forward(&mut g, c);
        LogProbLattice::new(g.value(out).clone())
    }
}
