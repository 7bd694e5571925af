//! Utterance-level duration ratio predictor trained with scalar flow matching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::numerics::nn::{integer_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{adaln_block, AdaLnModulation, Graph, Init, ParamStore, Tensor, TimeEmbedding, Var};

pub const MIN_RATIO: f64 = 0.1;
pub const MAX_RATIO: f64 = 10.0;

/// Target frames divided by source frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationRatio(f64);

impl DurationRatio {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::InvalidArgument(format!("duration ratio must be positive, got {value}")));
        }
        Ok(Self(value))
    }

    /// Clamps into `[0.1, 10]`; non-finite input maps to 1.
    pub fn clamped(raw: f64) -> Self {
        if raw.is_nan() {
            return Self(1.0);
        }
        Self(raw.clamp(MIN_RATIO, MAX_RATIO))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `round(ratio · source_len)`, at least one frame.
    pub fn target_len(self, source_len: usize) -> usize {
        ((self.0 * source_len as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationConfig {
    pub content_dim: usize,
    pub speaker_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            content_dim: 32,
            speaker_dim: 24,
            model_dim: 32,
            n_layers: 1,
            n_heads: 2,
            time_dim: 32,
            ffn_mult: 2,
        }
    }
}

impl DurationConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.content_dim, self.speaker_dim, self.model_dim, self.time_dim];
        if dims.contains(&0) {
            return Err(Error::Config("duration predictor dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 || (self.model_dim / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "duration model_dim {} needs an even head size with {} heads",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Softmax-weighted average of frames with learned scores.
#[derive(Clone, Debug)]
pub struct AttentivePool {
    score: Linear,
}

impl AttentivePool {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, init: Init, rng: &mut R) -> Result<Self> {
        Ok(Self {
            score: Linear::new(store, name, dim, 1, init, false, rng)?,
        })
    }

    /// `[T, d]` frames to a `[1, d]` row.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Var {
        let n = g.shape(frames).0;
        let scores = self.score.forward(g, frames);
        let scores = g.reshape(scores, 1, n);
        let weights = g.softmax(scores);
        g.matmul(weights, frames)
    }

    pub fn pool(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::Shape("attentive pooling needs at least one frame".into()));
        }
        if frames.cols() != self.score.in_dim {
            return Err(Error::Shape(format!(
                "pool expects width {}, got {}",
                self.score.in_dim,
                frames.cols()
            )));
        }
        let mut g = Graph::new(store);
        let x = g.input(frames.clone());
        let out = self.forward(&mut g, x);
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug)]
struct DurationLayer {
    attn_mod: AdaLnModulation,
    attn: MultiHeadAttention,
    ffn_mod: AdaLnModulation,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DurationPredictor {
    config: DurationConfig,
    input_proj: Linear,
    time: TimeEmbedding,
    layers: Vec<DurationLayer>,
    final_norm: LayerNorm,
    pool: AttentivePool,
    output_proj: Linear,
}

/// One draw of the scalar flow: start value and time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarDraw {
    pub r0: f64,
    pub t: f64,
}

impl ScalarDraw {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let r0 = rng.sample(StandardNormal);
        Self { r0, t: rng.random() }
    }
}

impl DurationPredictor {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: DurationConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let input_proj = Linear::new(
            store,
            &format!("{prefix}.input_proj"),
            config.content_dim + 1,
            d,
            Init::XavierUniform,
            true,
            rng,
        )?;
        let time = TimeEmbedding::new(store, &format!("{prefix}.time"), config.time_dim, rng)?;
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(DurationLayer {
                    attn_mod: AdaLnModulation::new(store, &format!("{p}.attn_mod"), config.time_dim, d, rng)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, d, config.n_heads, rng)?,
                    ffn_mod: AdaLnModulation::new(store, &format!("{p}.ffn_mod"), config.time_dim, d, rng)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d, rng)?;
        let pool = AttentivePool::new(store, &format!("{prefix}.pool"), d, Init::Normal(0.02), rng)?;
        let output_proj = Linear::new(
            store,
            &format!("{prefix}.output_proj"),
            d + config.speaker_dim,
            1,
            Init::Zeros,
            true,
            rng,
        )?;
        Ok(Self {
            config,
            input_proj,
            time,
            layers,
            final_norm,
            pool,
            output_proj,
        })
    }

    pub fn config(&self) -> &DurationConfig {
        &self.config
    }

    /// Scalar velocity `[1, 1]` for the noisy ratio `r_t`.
    pub fn forward(&self, g: &mut Graph, r_t: f64, t: f64, content: Var, speaker: Var) -> Var {
        let n = g.shape(content).0;
        let r = g.input(Tensor::matrix(n, 1, vec![r_t; n]).expect("n values"));
        let x = g.concat_cols(content, r);
        let mut h = self.input_proj.forward(g, x);
        let temb = self.time.forward(g, t);
        let time_act = g.silu(temb);
        let positions = integer_positions(n);
        for layer in &self.layers {
            h = adaln_block(g, h, time_act, &layer.attn_mod, |g, x| {
                layer.attn.forward(g, x, x, &positions, &positions)
            });
            h = adaln_block(g, h, time_act, &layer.ffn_mod, |g, x| layer.ffn.forward(g, x));
        }
        let h = self.final_norm.forward(g, h);
        let pooled = self.pool.forward(g, h);
        let joined = g.concat_cols(pooled, speaker);
        self.output_proj.forward(g, joined)
    }

    fn check(&self, content: &Tensor, speaker: &[f64]) -> Result<()> {
        if content.rank() != 2 || content.rows() == 0 || content.cols() != self.config.content_dim {
            return Err(Error::Shape(format!(
                "duration content must be [T>0, {}], got {:?}",
                self.config.content_dim,
                content.shape()
            )));
        }
        if speaker.len() != self.config.speaker_dim {
            return Err(Error::Shape(format!(
                "duration speaker input must have {} values, got {}",
                self.config.speaker_dim,
                speaker.len()
            )));
        }
        Ok(())
    }

    pub fn velocity(&self, store: &ParamStore, r_t: f64, t: f64, content: &Tensor, speaker: &[f64]) -> Result<f64> {
        self.check(content, speaker)?;
        let mut g = Graph::new(store);
        let c = g.input(content.clone());
        let s = g.input(Tensor::row_vector(speaker.to_vec()));
        let out = self.forward(&mut g, r_t, t, c, s);
        Ok(g.scalar(out))
    }
}

/// `(v − (r_true − r0))²` for a fixed draw.
pub fn duration_cfm_loss_with_draw(
    g: &mut Graph,
    predictor: &DurationPredictor,
    true_ratio: DurationRatio,
    content: Var,
    speaker: Var,
    draw: ScalarDraw,
) -> Var {
    let r = true_ratio.value();
    let r_t = (1.0 - draw.t) * draw.r0 + draw.t * r;
    let v = predictor.forward(g, r_t, draw.t, content, speaker);
    let target = g.input(Tensor::matrix(1, 1, vec![r - draw.r0]).expect("one value"));
    g.mse(v, target)
}

pub fn duration_cfm_loss<R: Rng>(
    g: &mut Graph,
    predictor: &DurationPredictor,
    true_ratio: DurationRatio,
    content: Var,
    speaker: Var,
    rng: &mut R,
) -> Var {
    let draw = ScalarDraw::sample(rng);
    duration_cfm_loss_with_draw(g, predictor, true_ratio, content, speaker, draw)
}

/// Euler-integrates the scalar flow from seeded noise and clamps the result.
pub fn predict_ratio(
    predictor: &DurationPredictor,
    store: &ParamStore,
    content: &Tensor,
    speaker: &[f64],
    cfg: SamplerConfig,
) -> Result<DurationRatio> {
    cfg.validate()?;
    predictor.check(content, speaker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut r: f64 = rng.sample(StandardNormal);
    let dt = 1.0 / cfg.n_steps as f64;
    for k in 0..cfg.n_steps {
        let t = k as f64 * dt;
        r += dt * predictor.velocity(store, r, t, content, speaker)?;
    }
    Ok(DurationRatio::clamped(r))
}
