use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::duration::DurationConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::flow::{GuidanceWeights, SamplerConfig, DEFAULT_P_CONTENT_DROP, DEFAULT_P_UNCOND};
use crate::numerics::optim::OptimizerKind;

/// Component removed for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// No CTC loss.
    Ctc,
    /// Null speaker embedding everywhere.
    Speaker,
    /// Content keys at their own integer positions.
    Posscale,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Ctc => "ctc",
            Ablation::Speaker => "speaker",
            Ablation::Posscale => "posscale",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "ctc" => Ok(Ablation::Ctc),
            "speaker" => Ok(Ablation::Speaker),
            "posscale" => Ok(Ablation::Posscale),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation {other:?} (expected ctc, speaker or posscale)"
            ))),
        }
    }
}

/// Network sizes shared by every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub speaker_dim: usize,
    /// Symbols including the blank.
    pub vocab_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub frontend_stride: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub duration_dim: usize,
    pub duration_layers: usize,
    pub duration_heads: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 24,
            speaker_dim: 24,
            vocab_size: 10,
            encoder_dim: 32,
            encoder_layers: 2,
            encoder_heads: 2,
            frontend_stride: 2,
            decoder_dim: 32,
            decoder_layers: 2,
            decoder_heads: 2,
            duration_dim: 16,
            duration_layers: 1,
            duration_heads: 2,
            time_dim: 32,
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.feature_dim,
            model_dim: self.encoder_dim,
            n_layers: self.encoder_layers,
            n_heads: self.encoder_heads,
            frontend_stride: self.frontend_stride,
            vocab_size: self.vocab_size,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn decoder(&self, ablation: Ablation) -> DecoderConfig {
        DecoderConfig {
            feature_dim: self.feature_dim,
            content_dim: self.encoder_dim,
            speaker_dim: self.speaker_dim,
            model_dim: self.decoder_dim,
            n_layers: self.decoder_layers,
            n_heads: self.decoder_heads,
            time_dim: self.time_dim,
            ffn_mult: self.ffn_mult,
            position_scaling: ablation != Ablation::Posscale,
            speaker_conditioning: ablation != Ablation::Speaker,
        }
    }

    pub fn duration(&self) -> DurationConfig {
        DurationConfig {
            content_dim: self.encoder_dim,
            speaker_dim: self.speaker_dim,
            model_dim: self.duration_dim,
            n_layers: self.duration_layers,
            n_heads: self.duration_heads,
            time_dim: self.time_dim,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.decoder(Ablation::None).validate()?;
        self.duration().validate()
    }
}

/// Settings for the native-only recognizer used to score intelligibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    pub n_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            n_steps: 600,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
    pub lambda_ctc: f64,
    pub lambda_dur: f64,
    pub p_uncond: f64,
    pub p_content_drop: f64,
    pub log_every: usize,
    pub val_every: usize,
    /// Flow-matching draws per validation utterance.
    pub val_draws: usize,
    pub ablate: Ablation,
    pub optimizer: OptimizerKind,
    pub model: ModelConfig,
    pub recognizer: RecognizerConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            lambda_ctc: 0.5,
            lambda_dur: 0.1,
            p_uncond: DEFAULT_P_UNCOND,
            p_content_drop: DEFAULT_P_CONTENT_DROP,
            log_every: 100,
            val_every: 500,
            val_draws: 4,
            ablate: Ablation::None,
            optimizer: OptimizerKind::default(),
            model: ModelConfig::default(),
            recognizer: RecognizerConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        let finite_non_negative = |x: f64| x >= 0.0 && x.is_finite();
        if !(finite_non_negative(self.lambda_ctc) && finite_non_negative(self.lambda_dur)) {
            return fail("loss weights must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !finite_non_negative(self.grad_clip) {
            return fail("grad_clip must be finite and non-negative");
        }
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.p_uncond) || !p_ok(self.p_content_drop) || self.p_uncond + self.p_content_drop > 1.0 {
            return fail("condition dropout probabilities must lie in [0, 1] and sum to at most 1");
        }
        let rate_ok = self.recognizer.learning_rate > 0.0 && self.recognizer.learning_rate.is_finite();
        if self.recognizer.batch_size == 0 || !rate_ok {
            return fail("recognizer needs a positive batch size and learning rate");
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.sampler.validate()?;
        self.guidance.validate()
    }

    /// Loss weight actually applied to the CTC term.
    pub fn effective_lambda_ctc(&self) -> f64 {
        if self.ablate == Ablation::Ctc {
            0.0
        } else {
            self.lambda_ctc
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_ctc, 0.5);
        assert_eq!(c.lambda_dur, 0.1);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(TrainConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = TrainConfig::from_toml("n_steps = 5\nablate = \"posscale\"\n[model]\ndecoder_layers = 1\n").unwrap();
        assert_eq!(c.n_steps, 5);
        assert_eq!(c.ablate, Ablation::Posscale);
        assert_eq!(c.model.decoder_layers, 1);
        assert_eq!(c.model.encoder_layers, 2);
        assert!(!c.model.decoder(c.ablate).position_scaling);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_toml("n_stepz = 5").is_err());
        assert!(TrainConfig::from_toml("[model]\nwidth = 3").is_err());
        assert!(TrainConfig::from_toml("lambda_ctc = -1.0").is_err());
        assert!(TrainConfig::from_toml("ablate = \"everything\"").is_err());
        assert!(TrainConfig::from_toml("[model]\nencoder_heads = 3").is_err());
        assert!(TrainConfig::from_toml("lambda_dur = inf").is_err());
        assert!(TrainConfig::from_toml("[optimizer]\nkind = \"adam\"\nbeta1 = nan\nbeta2 = 0.9\neps = 1e-8").is_err());
        assert!(TrainConfig::from_toml("[optimizer]\nkind = \"sgd_momentum\"\nmomentum = 0.9").is_ok());
    }

    #[test]
    fn ctc_ablation_zeroes_its_weight() {
        let c = TrainConfig {
            ablate: Ablation::Ctc,
            ..TrainConfig::default()
        };
        assert_eq!(c.effective_lambda_ctc(), 0.0);
        assert_eq!("speaker".parse::<Ablation>().unwrap(), Ablation::Speaker);
        assert!("x".parse::<Ablation>().is_err());
    }
}
