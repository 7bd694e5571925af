//! Time embedding and adaptive layer normalization (adaLN-Zero).

use rand::Rng;

use super::graph::{Graph, Var};
use super::nn::Linear;
use super::params::{Init, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Sinusoidal features of `t · 1000` over `dim` channels (cos half, sin half).
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Tensor::row_vector(out)
}

/// Sinusoidal map followed by a two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub freq_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let freq_dim = dim.max(2) & !1;
        Ok(Self {
            freq_dim,
            fc1: Linear::new(store, &format!("{name}.fc1"), freq_dim, dim, Init::Normal(0.02), true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, Init::Normal(0.02), true, rng)?,
        })
    }

    /// Embedding row `[1, dim]` for time `t`.
    pub fn forward(&self, g: &mut Graph, t: f64) -> Var {
        let s = g.input(sinusoidal_embedding(t, self.freq_dim));
        let h = self.fc1.forward(g, s);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Produces per-channel shift, scale and gate from the time embedding.
/// Zero-initialized, so every wrapped block starts as the identity.
#[derive(Clone, Debug)]
pub struct AdaLnModulation {
    pub proj: Linear,
    pub dim: usize,
}

impl AdaLnModulation {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, time_dim: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, time_dim, 3 * dim, Init::Zeros, true, rng)?,
            dim,
        })
    }

    /// `(shift, scale, gate)` rows from an already activated time embedding.
    pub fn forward(&self, g: &mut Graph, time_act: Var) -> (Var, Var, Var) {
        let m = self.proj.forward(g, time_act);
        let shift = g.slice_cols(m, 0, self.dim);
        let scale = g.slice_cols(m, self.dim, self.dim);
        let gate = g.slice_cols(m, 2 * self.dim, self.dim);
        (shift, scale, gate)
    }
}

/// `x + gate ⊙ sublayer(LN(x) ⊙ (1 + scale) + shift)`.
///
/// `time_act` is `silu(time_embedding)`, shared by all blocks of a network.
pub fn adaln_block(
    g: &mut Graph,
    x: Var,
    time_act: Var,
    modulation: &AdaLnModulation,
    sublayer: impl FnOnce(&mut Graph, Var) -> Var,
) -> Var {
    let (shift, scale, gate) = modulation.forward(g, time_act);
    let normed = g.layer_norm(x);
    let one_plus = g.add_const(scale, 1.0);
    let h = g.mul_row(normed, one_plus);
    let h = g.add_row(h, shift);
    let h = sublayer(g, h);
    let h = g.mul_row(h, gate);
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{graph_grad_check, randomize};
    use crate::numerics::nn::FeedForward;
    use crate::numerics::params::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_modulation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(Precision::F64);
        let temb = TimeEmbedding::new(&mut store, "t", 8, &mut rng).unwrap();
        let module = AdaLnModulation::new(&mut store, "m", 8, 6, &mut rng).unwrap();
        let ffn = FeedForward::new(&mut store, "f", 6, 12, &mut rng).unwrap();
        let x = Init::Normal(1.0).build(&[4, 6], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let te = temb.forward(&mut g, 0.3);
        let act = g.silu(te);
        let y = adaln_block(&mut g, xv, act, &module, |g, h| ffn.forward(g, h));
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input(Init::Normal(3.0).build(&[5, 8], &mut rng).map(|v| v + 2.0));
        let n = g.layer_norm(x);
        for row in g.value(n).iter_rows() {
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(Precision::F64);
        let temb = TimeEmbedding::new(&mut store, "t", 6, &mut rng).unwrap();
        let module = AdaLnModulation::new(&mut store, "m", 6, 8, &mut rng).unwrap();
        let ffn = FeedForward::new(&mut store, "f", 8, 8, &mut rng).unwrap();
        randomize(&mut store, 0.5, &mut rng);
        let x = Init::Normal(1.0).build(&[3, 8], &mut rng);
        let err = graph_grad_check(&mut store, 1e-4, |g| {
            let xv = g.input(x.clone());
            let te = temb.forward(g, 0.4);
            let act = g.silu(te);
            let y = adaln_block(g, xv, act, &module, |g, h| ffn.forward(g, h));
            let sq = g.square(y);
            g.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
