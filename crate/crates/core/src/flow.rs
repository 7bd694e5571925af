//! Conditional flow matching: training objective, condition dropout,
//! two-way classifier-free guidance and the Euler sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoder::{ConditionMask, Decoder, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_P_UNCOND: f64 = 0.1;
pub const DEFAULT_P_CONTENT_DROP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceWeights {
    /// Strength of the full-versus-unconditional direction.
    pub w1: f64,
    /// Strength of the full-versus-content-dropped direction.
    pub w2: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0 }
    }
}

impl GuidanceWeights {
    pub const NONE: Self = Self { w1: 0.0, w2: 0.0 };

    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let w = Self { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w1.is_finite() && self.w2 >= 0.0 && self.w2.is_finite()) {
            return Err(Error::Config(format!(
                "guidance weights must be finite and non-negative, got ({}, {})",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 32, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }
}

/// One draw of the flow-matching noise and time.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw {
    pub x0: Tensor,
    pub t: f64,
}

impl FlowDraw {
    pub fn sample<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Self {
        let t = rng.random::<f64>();
        Self {
            x0: standard_normal(rng, rows, cols),
            t,
        }
    }

    /// `(1 − t)·x0 + t·x1`.
    pub fn interpolate(&self, x1: &Tensor) -> Result<Tensor> {
        let t = self.t;
        self.x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
    }

    /// Constant velocity `x1 − x0` of the straight path.
    pub fn target(&self, x1: &Tensor) -> Result<Tensor> {
        self.x0.zip_map(x1, |a, b| b - a)
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("rows × cols values")
}

/// Flow-matching loss for a fixed draw. `velocity` maps the graph node of
/// `x_t` and the time to a prediction of the same shape.
pub fn cfm_loss_with_draw<F>(g: &mut Graph, x1: &Tensor, draw: &FlowDraw, velocity: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, f64) -> Var,
{
    let xt = draw.interpolate(x1)?;
    let target = draw.target(x1)?;
    let xt = g.input(xt);
    let v = velocity(g, xt, draw.t);
    if g.shape(v) != (x1.rows(), x1.cols()) {
        return Err(Error::Shape(format!(
            "velocity {:?} does not match target {:?}",
            g.shape(v),
            x1.shape()
        )));
    }
    let target = g.input(target);
    Ok(g.mse(v, target))
}

/// Samples `x0 ~ N(0, I)` and `t ~ U[0, 1)` and returns the loss node.
pub fn cfm_loss<R, F>(g: &mut Graph, x1: &Tensor, rng: &mut R, velocity: F) -> Result<Var>
where
    R: Rng,
    F: FnOnce(&mut Graph, Var, f64) -> Var,
{
    let draw = FlowDraw::sample(rng, x1.rows(), x1.cols());
    cfm_loss_with_draw(g, x1, &draw, velocity)
}

pub fn sample_condition_mask<R: Rng>(rng: &mut R, p_uncond: f64, p_content_drop: f64) -> Result<ConditionMask> {
    let valid = |p: f64| (0.0..=1.0).contains(&p);
    if !valid(p_uncond) || !valid(p_content_drop) || p_uncond + p_content_drop > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "dropout probabilities ({p_uncond}, {p_content_drop}) must lie in [0, 1] and sum to at most 1"
        )));
    }
    let u = rng.random::<f64>();
    Ok(if u < p_uncond {
        ConditionMask::UNCONDITIONAL
    } else if u < p_uncond + p_content_drop {
        ConditionMask::CONTENT_ONLY
    } else {
        ConditionMask::FULL
    })
}

/// `v_full + w1·(v_full − v_uncond) + w2·(v_full − v_content_dropped)`.
pub fn cfg_combine(
    v_full: &Tensor,
    v_uncond: &Tensor,
    v_content_dropped: &Tensor,
    weights: GuidanceWeights,
) -> Result<Tensor> {
    if v_full.shape() != v_uncond.shape() || v_full.shape() != v_content_dropped.shape() {
        return Err(Error::Shape(format!(
            "guidance branches disagree: {:?}, {:?}, {:?}",
            v_full.shape(),
            v_uncond.shape(),
            v_content_dropped.shape()
        )));
    }
    let GuidanceWeights { w1, w2 } = weights;
    let data = v_full
        .data()
        .iter()
        .zip(v_uncond.data())
        .zip(v_content_dropped.data())
        .map(|((&f, &u), &c)| f + w1 * (f - u) + w2 * (f - c))
        .collect();
    Tensor::new(v_full.shape().to_vec(), data)
}

/// A velocity model with its conditions already bound.
pub trait VelocityField {
    fn feature_dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: f64, mask: ConditionMask) -> Result<Tensor>;
}

/// Left-endpoint Euler integration from seeded noise, guided at every step.
/// Branches whose weight is zero are not evaluated.
pub fn euler_sample<M: VelocityField + ?Sized>(
    model: &M,
    tgt_len: usize,
    weights: GuidanceWeights,
    cfg: SamplerConfig,
) -> Result<Tensor> {
    if tgt_len == 0 {
        return Err(Error::InvalidArgument("target length must be at least 1".into()));
    }
    weights.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = standard_normal(&mut rng, tgt_len, model.feature_dim());
    let dt = 1.0 / cfg.n_steps as f64;
    for k in 0..cfg.n_steps {
        let t = k as f64 / cfg.n_steps as f64;
        let full = model.velocity(&x, t, ConditionMask::FULL)?;
        let uncond = if weights.w1 != 0.0 {
            model.velocity(&x, t, ConditionMask::UNCONDITIONAL)?
        } else {
            full.clone()
        };
        let content_dropped = if weights.w2 != 0.0 {
            model.velocity(&x, t, ConditionMask::CONTENT_ONLY)?
        } else {
            full.clone()
        };
        let v = cfg_combine(&full, &uncond, &content_dropped, weights)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("sampled features".into()));
    }
    Ok(x)
}

/// Decoder bound to one content sequence and one speaker.
pub struct DecoderField<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
    pub content: &'a Tensor,
    pub speaker: &'a SpeakerEmbedding,
}

impl VelocityField for DecoderField<'_> {
    fn feature_dim(&self) -> usize {
        self.decoder.config().feature_dim
    }

    fn velocity(&self, x: &Tensor, t: f64, mask: ConditionMask) -> Result<Tensor> {
        self.decoder.velocity(self.store, x, t, self.content, self.speaker, mask)
    }
}

pub mod toy {
    //! Unconditional MLP velocity model for low-dimensional sanity checks.

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::{cfm_loss_with_draw, standard_normal, FlowDraw, VelocityField};
    use crate::decoder::ConditionMask;
    use crate::error::Result;
    use crate::numerics::adaln::sinusoidal_embedding;
    use crate::numerics::nn::Linear;
    use crate::numerics::optim::{Optimizer, OptimizerKind};
    use crate::numerics::{GradBuffer, Graph, Init, ParamStore, Precision, Tensor, Var};

    const TIME_FEATURES: usize = 16;

    pub struct MlpVelocity {
        pub store: ParamStore,
        dim: usize,
        layers: Vec<Linear>,
    }

    impl MlpVelocity {
        pub fn new(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new(Precision::F64);
            let widths = [dim + TIME_FEATURES, hidden, hidden, dim];
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(&mut store, &format!("mlp.{i}"), w[0], w[1], Init::XavierUniform, true, &mut rng))
                .collect::<Result<_>>()?;
            Ok(Self { store, dim, layers })
        }

        /// Rows of `x` may each carry their own time.
        pub fn forward(&self, g: &mut Graph, x: Var, times: &[f64]) -> Var {
            let rows: Vec<Vec<f64>> = times
                .iter()
                .map(|&t| sinusoidal_embedding(t / 10.0, TIME_FEATURES).into_data())
                .collect();
            let tf = g.input(Tensor::from_rows(&rows).expect("equal widths"));
            let mut h = g.concat_cols(x, tf);
            for (i, layer) in self.layers.iter().enumerate() {
                h = layer.forward(g, h);
                if i + 1 < self.layers.len() {
                    h = g.silu(h);
                }
            }
            h
        }

        /// Fits `sample_target` with per-row flow-matching draws.
        pub fn train<F>(&mut self, steps: usize, batch: usize, lr: f64, seed: u64, mut sample_target: F) -> Result<f64>
        where
            F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut opt = Optimizer::new(OptimizerKind::default(), &self.store);
            let mut grads = GradBuffer::zeros_like(&self.store);
            let mut last = f64::NAN;
            for _ in 0..steps {
                let rows: Vec<Vec<f64>> = (0..batch).map(|_| sample_target(&mut rng)).collect();
                let x1 = Tensor::from_rows(&rows)?;
                let x0 = standard_normal(&mut rng, batch, self.dim);
                let times: Vec<f64> = (0..batch).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                let mut xt = x0.clone();
                let mut target = x0.clone();
                for r in 0..batch {
                    let t = times[r];
                    for c in 0..self.dim {
                        let (a, b) = (x0.row(r)[c], x1.row(r)[c]);
                        xt.row_mut(r)[c] = (1.0 - t) * a + t * b;
                        target.row_mut(r)[c] = b - a;
                    }
                }
                let mut g = Graph::new(&self.store);
                let xv = g.input(xt);
                let v = self.forward(&mut g, xv, &times);
                let tv = g.input(target);
                let loss = g.mse(v, tv);
                last = g.scalar(loss);
                let gr = g.backward(loss)?;
                grads.clear();
                gr.accumulate_into(&mut grads, 1.0);
                opt.step(&mut self.store, &grads, lr);
            }
            Ok(last)
        }

        /// Single-draw loss used by gradient checks.
        pub fn loss_graph(&self, g: &mut Graph, x1: &Tensor, draw: &FlowDraw) -> Result<Var> {
            cfm_loss_with_draw(g, x1, draw, |g, xt, t| {
                let times = vec![t; x1.rows()];
                self.forward(g, xt, &times)
            })
        }
    }

    impl VelocityField for MlpVelocity {
        fn feature_dim(&self) -> usize {
            self.dim
        }

        fn velocity(&self, x: &Tensor, t: f64, _mask: ConditionMask) -> Result<Tensor> {
            let mut g = Graph::new(&self.store);
            let xv = g.input(x.clone());
            let out = self.forward(&mut g, xv, &vec![t; x.rows()]);
            Ok(g.value(out).clone())
        }
    }

    /// Trains an unconditional model on `N(mean, I)` in two dimensions.
    pub fn gaussian_2d(mean: [f64; 2], steps: usize, seed: u64) -> Result<MlpVelocity> {
        let mut model = MlpVelocity::new(2, 64, seed)?;
        model.train(steps, 64, 3e-3, seed.wrapping_add(1), |rng| {
            let n = standard_normal(rng, 1, 2);
            vec![mean[0] + n.data()[0], mean[1] + n.data()[1]]
        })?;
        Ok(model)
    }
}
