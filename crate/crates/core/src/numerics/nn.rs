//! Parameterized layers shared by the encoder, decoder and duration
//! predictor.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::rope::ROPE_BASE;
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.build(&[in_dim, out_dim], rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Init::Zeros.build(&[out_dim], rng))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Init::Zeros.build(&[dim], rng).map(|_| 1.0))?,
            bias: store.add(format!("{name}.bias"), Init::Zeros.build(&[dim], rng))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, Init::XavierUniform, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, Init::XavierUniform, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head attention with rotary positions on queries and keys.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "{name}: model dim {dim} not divisible by {n_heads} heads"
            )));
        }
        if (dim / n_heads) % 2 != 0 {
            return Err(Error::Config(format!("{name}: head dimension must be even for rotary encoding")));
        }
        let lin = |store: &mut ParamStore, suffix: &str, i: usize, rng: &mut R| {
            Linear::new(store, &format!("{name}.{suffix}"), i, dim, Init::XavierUniform, true, rng)
        };
        Ok(Self {
            wq: lin(store, "wq", dim, rng)?,
            wk: lin(store, "wk", kv_dim, rng)?,
            wv: lin(store, "wv", kv_dim, rng)?,
            wo: lin(store, "wo", dim, rng)?,
            n_heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, q_pos: &[f64], k_pos: &[f64]) -> Var {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, keys);
        let q = g.rope(q, q_pos, self.n_heads, ROPE_BASE);
        let k = g.rope(k, k_pos, self.n_heads, ROPE_BASE);
        let o = g.attention(q, k, v, self.n_heads);
        self.wo.forward(g, o)
    }
}

/// Integer positions `0..n`.
pub fn integer_positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}
