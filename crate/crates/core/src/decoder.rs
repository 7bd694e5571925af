//! Conditional velocity network: a stack of AdaLN-modulated transformer
//! blocks that attend over themselves and over position-scaled content.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{integer_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{adaln_block, AdaLnModulation, Graph, Init, ParamId, ParamStore, Tensor, TimeEmbedding, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub feature_dim: usize,
    pub content_dim: usize,
    pub speaker_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
    /// Place content keys on the target time axis. When false, content keys
    /// keep their own integer positions.
    pub position_scaling: bool,
    /// When false the null speaker is used for every input.
    pub speaker_conditioning: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 24,
            content_dim: 32,
            speaker_dim: 24,
            model_dim: 32,
            n_layers: 2,
            n_heads: 2,
            time_dim: 32,
            ffn_mult: 2,
            position_scaling: true,
            speaker_conditioning: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.content_dim, self.speaker_dim, self.model_dim, self.time_dim];
        if dims.contains(&0) {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 || (self.model_dim / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "decoder model_dim {} needs an even head size with {} heads",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Maps content index `i` of `src_len` frames onto the target axis:
/// `i · (tgt_len − 1) / (src_len − 1)`, so the first and last frames land
/// exactly on `0` and `tgt_len − 1`. A single frame sits at the midpoint.
pub fn scale_positions(src_len: usize, tgt_len: usize) -> Result<Vec<f64>> {
    if src_len == 0 || tgt_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "position scaling needs non-empty sequences, got {src_len} -> {tgt_len}"
        )));
    }
    if src_len == 1 {
        return Ok(vec![(tgt_len - 1) as f64 / 2.0]);
    }
    let span = (tgt_len - 1) as f64;
    let denom = (src_len - 1) as f64;
    // The numerator is an exact integer, so the last position divides exactly.
    Ok((0..src_len).map(|i| i as f64 * span / denom).collect())
}

/// Which conditions are replaced by their learned null embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionMask {
    pub drop_content: bool,
    pub drop_speaker: bool,
}

impl ConditionMask {
    pub const FULL: Self = Self {
        drop_content: false,
        drop_speaker: false,
    };
    pub const CONTENT_ONLY: Self = Self {
        drop_content: true,
        drop_speaker: false,
    };
    pub const UNCONDITIONAL: Self = Self {
        drop_content: true,
        drop_speaker: true,
    };
}

/// L2-normalized speaker vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("speaker embedding must be finite and non-empty".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("speaker embedding has zero norm".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_mod: AdaLnModulation,
    self_attn: MultiHeadAttention,
    cross_mod: AdaLnModulation,
    cross_attn: MultiHeadAttention,
    ffn_mod: AdaLnModulation,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    input_proj: Linear,
    speaker_proj: Linear,
    content_proj: Linear,
    null_content: ParamId,
    null_speaker: ParamId,
    time: TimeEmbedding,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    output_proj: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let lin = |store: &mut ParamStore, name: &str, i: usize, o: usize, init: Init, rng: &mut R| {
            Linear::new(store, &format!("{prefix}.{name}"), i, o, init, true, rng)
        };
        let input_proj = lin(store, "input_proj", config.feature_dim, d, Init::XavierUniform, rng)?;
        let speaker_proj = lin(store, "speaker_proj", config.speaker_dim, d, Init::XavierUniform, rng)?;
        let content_proj = lin(store, "content_proj", config.content_dim, d, Init::XavierUniform, rng)?;
        let null_content = store.add(
            format!("{prefix}.null_content"),
            Init::Normal(0.02).build(&[1, config.content_dim], rng),
        )?;
        let null_speaker = store.add(
            format!("{prefix}.null_speaker"),
            Init::Normal(0.02).build(&[1, config.speaker_dim], rng),
        )?;
        let time = TimeEmbedding::new(store, &format!("{prefix}.time"), config.time_dim, rng)?;
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(DecoderLayer {
                    self_mod: AdaLnModulation::new(store, &format!("{p}.self_mod"), config.time_dim, d, rng)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, d, config.n_heads, rng)?,
                    cross_mod: AdaLnModulation::new(store, &format!("{p}.cross_mod"), config.time_dim, d, rng)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, d, config.n_heads, rng)?,
                    ffn_mod: AdaLnModulation::new(store, &format!("{p}.ffn_mod"), config.time_dim, d, rng)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d, rng)?;
        let output_proj = lin(store, "output_proj", d, config.feature_dim, Init::Zeros, rng)?;
        Ok(Self {
            config,
            input_proj,
            speaker_proj,
            content_proj,
            null_content,
            null_speaker,
            time,
            layers,
            final_norm,
            output_proj,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Velocity prediction `[L, feature_dim]` for the state `x_t`.
    ///
    /// `content` is `[T', content_dim]` and `speaker` is `[1, speaker_dim]`.
    /// Masked conditions are never read.
    pub fn forward(&self, g: &mut Graph, x_t: Var, t: f64, content: Var, speaker: Var, mask: ConditionMask) -> Var {
        let target_len = g.shape(x_t).0;
        let content = if mask.drop_content {
            g.param(self.null_content)
        } else {
            content
        };
        let speaker = if mask.drop_speaker || !self.config.speaker_conditioning {
            g.param(self.null_speaker)
        } else {
            speaker
        };
        let content_len = g.shape(content).0;
        let q_pos = integer_positions(target_len);
        let k_pos = if self.config.position_scaling {
            scale_positions(content_len, target_len).expect("non-empty sequences")
        } else {
            integer_positions(content_len)
        };

        let h = self.input_proj.forward(g, x_t);
        let s = self.speaker_proj.forward(g, speaker);
        let mut h = g.add_row(h, s);
        let memory = self.content_proj.forward(g, content);
        let temb = self.time.forward(g, t);
        let time_act = g.silu(temb);

        for layer in &self.layers {
            h = adaln_block(g, h, time_act, &layer.self_mod, |g, n| {
                layer.self_attn.forward(g, n, n, &q_pos, &q_pos)
            });
            h = adaln_block(g, h, time_act, &layer.cross_mod, |g, n| {
                layer.cross_attn.forward(g, n, memory, &q_pos, &k_pos)
            });
            h = adaln_block(g, h, time_act, &layer.ffn_mod, |g, n| layer.ffn.forward(g, n));
        }
        let h = self.final_norm.forward(g, h);
        self.output_proj.forward(g, h)
    }

    /// Shape-checked inference entry point.
    pub fn velocity(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: f64,
        content: &Tensor,
        speaker: &SpeakerEmbedding,
        mask: ConditionMask,
    ) -> Result<Tensor> {
        let c = &self.config;
        if x_t.rank() != 2 || x_t.rows() == 0 || x_t.cols() != c.feature_dim {
            return Err(Error::Shape(format!(
                "state must be [L>0, {}], got {:?}",
                c.feature_dim,
                x_t.shape()
            )));
        }
        if content.rank() != 2 || content.rows() == 0 || content.cols() != c.content_dim {
            return Err(Error::Shape(format!(
                "content must be [T>0, {}], got {:?}",
                c.content_dim,
                content.shape()
            )));
        }
        if speaker.dim() != c.speaker_dim {
            return Err(Error::Shape(format!(
                "speaker embedding must have {} values, got {}",
                c.speaker_dim,
                speaker.dim()
            )));
        }
        if !t.is_finite() {
            return Err(Error::InvalidArgument("flow time must be finite".into()));
        }
        let mut g = Graph::new(store);
        let x = g.input(x_t.clone());
        let cv = g.input(content.clone());
        let sv = g.input(Tensor::row_vector(speaker.values().to_vec()));
        let out = self.forward(&mut g, x, t, cv, sv, mask);
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{graph_grad_check, randomize};
    use crate::numerics::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DecoderConfig {
        DecoderConfig {
            feature_dim: 3,
            content_dim: 4,
            speaker_dim: 2,
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
            time_dim: 6,
            ffn_mult: 1,
            position_scaling: true,
            speaker_conditioning: true,
        }
    }

    fn speaker(v: &[f64]) -> SpeakerEmbedding {
        SpeakerEmbedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn scaled_positions_match_worked_example() {
        let p = scale_positions(8, 6).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[7], 5.0);
        assert!((p[3] - 15.0 / 7.0).abs() < 1e-12);
        assert_eq!(scale_positions(1, 6).unwrap(), vec![2.5]);
        assert_eq!(scale_positions(5, 1).unwrap(), vec![0.0; 5]);
        assert!(scale_positions(0, 3).is_err());
        assert!(scale_positions(3, 0).is_err());
    }

    #[test]
    fn scaled_positions_are_monotone_and_bounded() {
        for src in 2..40 {
            for tgt in 1..40 {
                let p = scale_positions(src, tgt).unwrap();
                assert_eq!(p[0], 0.0);
                assert_eq!(p[src - 1], (tgt - 1) as f64);
                assert!(p.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn speaker_embedding_is_normalized() {
        let s = speaker(&[3.0, 4.0]);
        assert_eq!(s.values(), &[0.6, 0.8]);
        assert!(SpeakerEmbedding::new(vec![0.0, 0.0]).is_err());
        assert!(SpeakerEmbedding::new(vec![]).is_err());
    }

    #[test]
    fn output_shape_follows_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let dec = Decoder::new(&mut store, "dec", small(), &mut rng).unwrap();
        for (src, tgt) in [(5, 3), (3, 5), (7, 7)] {
            let x = Init::Normal(1.0).build(&[tgt, 3], &mut rng);
            let c = Init::Normal(1.0).build(&[src, 4], &mut rng);
            let v = dec.velocity(&store, &x, 0.3, &c, &speaker(&[1.0, 0.0]), ConditionMask::FULL).unwrap();
            assert_eq!(v.shape(), &[tgt, 3]);
        }
    }

    #[test]
    fn output_is_zero_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let dec = Decoder::new(&mut store, "dec", small(), &mut rng).unwrap();
        let x = Init::Normal(1.0).build(&[4, 3], &mut rng);
        let c = Init::Normal(1.0).build(&[6, 4], &mut rng);
        let v = dec.velocity(&store, &x, 0.7, &c, &speaker(&[0.0, 1.0]), ConditionMask::FULL).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let dec = Decoder::new(&mut store, "dec", small(), &mut rng).unwrap();
        let x = Tensor::zeros(&[4, 3]);
        let c = Tensor::zeros(&[6, 4]);
        let s = speaker(&[1.0, 0.0]);
        assert!(dec.velocity(&store, &Tensor::zeros(&[4, 2]), 0.1, &c, &s, ConditionMask::FULL).is_err());
        assert!(dec.velocity(&store, &x, 0.1, &Tensor::zeros(&[0, 4]), &s, ConditionMask::FULL).is_err());
        assert!(dec.velocity(&store, &x, 0.1, &c, &speaker(&[1.0, 0.0, 0.0]), ConditionMask::FULL).is_err());
        let bad = DecoderConfig { model_dim: 6, n_heads: 2, ..small() };
        assert!(Decoder::new(&mut store, "bad", bad, &mut rng).is_err());
    }

    fn trained_like(seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let dec = Decoder::new(&mut store, "dec", small(), &mut rng).unwrap();
        randomize(&mut store, 0.5, &mut rng);
        (store, dec)
    }

    #[test]
    fn unconditional_forward_ignores_conditions() {
        let (store, dec) = trained_like(4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = Init::Normal(1.0).build(&[5, 3], &mut rng);
        let c1 = Init::Normal(1.0).build(&[6, 4], &mut rng);
        let c2 = Init::Normal(1.0).build(&[2, 4], &mut rng);
        let a = dec.velocity(&store, &x, 0.4, &c1, &speaker(&[1.0, 0.0]), ConditionMask::UNCONDITIONAL).unwrap();
        let b = dec.velocity(&store, &x, 0.4, &c2, &speaker(&[0.0, 1.0]), ConditionMask::UNCONDITIONAL).unwrap();
        assert_eq!(a, b);
        let full = dec.velocity(&store, &x, 0.4, &c1, &speaker(&[1.0, 0.0]), ConditionMask::FULL).unwrap();
        assert_ne!(a, full);
        let c = dec.velocity(&store, &x, 0.4, &c1, &speaker(&[1.0, 0.0]), ConditionMask::CONTENT_ONLY).unwrap();
        let d = dec.velocity(&store, &x, 0.4, &c2, &speaker(&[1.0, 0.0]), ConditionMask::CONTENT_ONLY).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn speaker_ablation_ignores_the_speaker() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let cfg = DecoderConfig {
            speaker_conditioning: false,
            ..small()
        };
        let dec = Decoder::new(&mut store, "dec", cfg, &mut rng).unwrap();
        randomize(&mut store, 0.5, &mut rng);
        let x = Init::Normal(1.0).build(&[5, 3], &mut rng);
        let c = Init::Normal(1.0).build(&[6, 4], &mut rng);
        let a = dec.velocity(&store, &x, 0.4, &c, &speaker(&[1.0, 0.0]), ConditionMask::FULL).unwrap();
        let b = dec.velocity(&store, &x, 0.4, &c, &speaker(&[0.0, 1.0]), ConditionMask::FULL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn content_positions_depend_on_target_length() {
        let (store, dec) = trained_like(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let c = Init::Normal(1.0).build(&[6, 4], &mut rng);
        let x = Init::Normal(1.0).build(&[8, 3], &mut rng);
        let s = speaker(&[0.6, 0.8]);
        let long = dec.velocity(&store, &x, 0.5, &c, &s, ConditionMask::FULL).unwrap();
        let mut rows: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
        rows.truncate(5);
        let short = dec
            .velocity(&store, &Tensor::from_rows(&rows).unwrap(), 0.5, &c, &s, ConditionMask::FULL)
            .unwrap();
        assert_ne!(&long.data()[..5 * 3], short.data());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new(Precision::F64);
        let dec = Decoder::new(&mut store, "dec", small(), &mut rng).unwrap();
        randomize(&mut store, 0.4, &mut rng);
        let x = Init::Normal(1.0).build(&[5, 3], &mut rng);
        let c = Init::Normal(1.0).build(&[4, 4], &mut rng);
        let target = Init::Normal(1.0).build(&[5, 3], &mut rng);
        for mask in [ConditionMask::FULL, ConditionMask::UNCONDITIONAL] {
            let err = graph_grad_check(&mut store, 1e-4, |g| {
                let xv = g.input(x.clone());
                let cv = g.leaf(c.clone());
                let sv = g.input(Tensor::row_vector(vec![0.6, -0.8]));
                let v = dec.forward(g, xv, 0.35, cv, sv, mask);
                let tv = g.input(target.clone());
                g.mse(v, tv)
            })
            .unwrap();
            assert!(err < 1e-4, "{mask:?}: relative error {err}");
        }
    }
}
