use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::AccentNormalizer;
use crate::decoder::SpeakerEmbedding;
use crate::duration::{predict_ratio, DurationRatio};
use crate::encoder::ContentFeatures;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, DecoderField, GuidanceWeights, SamplerConfig};
use crate::numerics::Tensor;

/// How the output length is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DurationMode {
    /// Same number of frames as the source.
    Inherit,
    /// Source length scaled by the predicted ratio.
    Predict,
    /// Exactly `len` frames.
    Fixed { len: usize },
}

impl DurationMode {
    pub fn name(&self) -> &'static str {
        match self {
            DurationMode::Inherit => "inherit",
            DurationMode::Predict => "predict",
            DurationMode::Fixed { .. } => "fixed",
        }
    }

    /// Builds a mode from its name and the optional fixed length.
    pub fn parse(name: &str, fixed_len: Option<usize>) -> Result<Self> {
        let mode = match (name, fixed_len) {
            ("inherit", None) => DurationMode::Inherit,
            ("predict", None) => DurationMode::Predict,
            ("fixed", Some(len)) => DurationMode::Fixed { len },
            ("fixed", None) => return Err(Error::InvalidArgument("fixed mode needs a length".into())),
            ("inherit" | "predict", Some(_)) => {
                return Err(Error::InvalidArgument("a fixed length only applies to fixed mode".into()))
            }
            (other, _) => {
                return Err(Error::InvalidArgument(format!(
                    "unknown duration mode {other:?} (expected inherit, predict or fixed)"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DurationMode::Fixed { len: 0 } => Err(Error::InvalidArgument("fixed length must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DurationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DurationMode::Fixed { len } => write!(f, "fixed({len})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for DurationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DurationMode::parse(s, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvertOptions {
    pub mode: DurationMode,
    pub weights: GuidanceWeights,
    /// Shared by the feature sampler and the ratio sampler.
    pub sampler: SamplerConfig,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            mode: DurationMode::Inherit,
            weights: GuidanceWeights::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionMetadata {
    #[serde(flatten)]
    pub mode: DurationMode,
    pub source_len: usize,
    pub target_len: usize,
    /// Output frames per source frame.
    pub ratio: f64,
    /// Set when the duration predictor ran.
    pub predicted_ratio: Option<f64>,
    pub seed: u64,
    pub n_steps: usize,
    pub w1: f64,
    pub w2: f64,
}

#[derive(Clone, Debug)]
pub struct Conversion {
    pub features: Tensor,
    pub metadata: ConversionMetadata,
}

impl AccentNormalizer {
    pub fn predict_ratio(
        &self,
        content: &ContentFeatures,
        speaker: &SpeakerEmbedding,
        sampler: SamplerConfig,
    ) -> Result<DurationRatio> {
        self.check_speaker(speaker)?;
        predict_ratio(
            &self.duration,
            &self.store,
            &content.frames,
            &self.duration_speaker(speaker),
            sampler,
        )
    }

    /// Samples features for already-encoded content at a chosen length.
    pub fn generate(
        &self,
        content: &ContentFeatures,
        speaker: &SpeakerEmbedding,
        target_len: usize,
        weights: GuidanceWeights,
        sampler: SamplerConfig,
    ) -> Result<Tensor> {
        self.check_speaker(speaker)?;
        let field = DecoderField {
            decoder: &self.decoder,
            store: &self.store,
            content: &content.frames,
            speaker,
        };
        euler_sample(&field, target_len, weights, sampler)
    }
}

/// Converts one source utterance to native-style features.
pub fn convert(
    model: &AccentNormalizer,
    source: &Tensor,
    speaker: &SpeakerEmbedding,
    options: &ConvertOptions,
) -> Result<Conversion> {
    options.mode.validate()?;
    let content = model.content(source)?;
    let source_len = content.source_len;
    let (target_len, predicted_ratio) = match options.mode {
        DurationMode::Inherit => (source_len, None),
        DurationMode::Fixed { len } => (len, None),
        DurationMode::Predict => {
            let ratio = model.predict_ratio(&content, speaker, options.sampler)?;
            (ratio.target_len(source_len), Some(ratio.value()))
        }
    };
    let features = model.generate(&content, speaker, target_len, options.weights, options.sampler)?;
    Ok(Conversion {
        features,
        metadata: ConversionMetadata {
            mode: options.mode,
            source_len,
            target_len,
            ratio: target_len as f64 / source_len as f64,
            predicted_ratio,
            seed: options.sampler.seed,
            n_steps: options.sampler.n_steps,
            w1: options.weights.w1,
            w2: options.weights.w2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;
    use crate::pipeline::config::{Ablation, ModelConfig};
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            speaker_dim: 3,
            vocab_size: 5,
            encoder_dim: 8,
            encoder_layers: 1,
            encoder_heads: 2,
            frontend_stride: 2,
            decoder_dim: 8,
            decoder_layers: 1,
            decoder_heads: 2,
            duration_dim: 8,
            duration_layers: 1,
            duration_heads: 2,
            time_dim: 8,
            ffn_mult: 1,
        }
    }

    fn source(len: usize) -> Tensor {
        Tensor::matrix(len, 4, (0..len * 4).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    fn speaker() -> SpeakerEmbedding {
        SpeakerEmbedding::new(vec![1.0, 0.5, -0.25]).unwrap()
    }

    fn fast(mode: DurationMode) -> ConvertOptions {
        ConvertOptions {
            mode,
            weights: GuidanceWeights::default(),
            sampler: SamplerConfig { n_steps: 2, seed: 3 },
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(DurationMode::parse("fixed", Some(100)).unwrap(), DurationMode::Fixed { len: 100 });
        assert_eq!("predict".parse::<DurationMode>().unwrap(), DurationMode::Predict);
        assert!(DurationMode::parse("fixed", Some(0)).is_err());
        assert!(DurationMode::parse("fixed", None).is_err());
        assert!(DurationMode::parse("inherit", Some(3)).is_err());
        assert!(DurationMode::parse("stretch", None).is_err());
    }

    #[test]
    fn inherit_and_fixed_lengths() {
        let model = AccentNormalizer::new(&tiny(), Ablation::None, 1, Precision::F32).unwrap();
        let out = convert(&model, &source(130), &speaker(), &fast(DurationMode::Inherit)).unwrap();
        assert_eq!(out.features.rows(), 130);
        assert_eq!(out.metadata.target_len, 130);
        let out = convert(&model, &source(37), &speaker(), &fast(DurationMode::Fixed { len: 100 })).unwrap();
        assert_eq!(out.features.shape(), &[100, 4]);
        assert_eq!(out.metadata.ratio, 100.0 / 37.0);
        assert!(convert(&model, &source(5), &speaker(), &fast(DurationMode::Fixed { len: 0 })).is_err());
    }

    #[test]
    fn predict_mode_scales_the_source_length() {
        let model = AccentNormalizer::new(&tiny(), Ablation::None, 1, Precision::F32).unwrap();
        let out = convert(&model, &source(40), &speaker(), &fast(DurationMode::Predict)).unwrap();
        let ratio = out.metadata.predicted_ratio.unwrap();
        assert_eq!(out.metadata.target_len, DurationRatio::new(ratio).unwrap().target_len(40));
        assert_eq!(out.features.rows(), out.metadata.target_len);
        assert_eq!(DurationRatio::new(0.75).unwrap().target_len(8), 6);
    }

    #[test]
    fn zero_weights_match_single_branch_sampling() {
        let model = AccentNormalizer::new(&tiny(), Ablation::None, 4, Precision::F32).unwrap();
        let mut opts = fast(DurationMode::Inherit);
        opts.weights = GuidanceWeights::NONE;
        let guided = convert(&model, &source(9), &speaker(), &opts).unwrap();
        let content = model.content(&source(9)).unwrap();
        let field = DecoderField {
            decoder: &model.decoder,
            store: &model.store,
            content: &content.frames,
            speaker: &speaker(),
        };
        let plain = crate::flow::euler_sample(&field, 9, GuidanceWeights::NONE, opts.sampler).unwrap();
        assert_eq!(guided.features.data(), plain.data());
    }

    #[test]
    fn metadata_serializes_mode_inline() {
        let meta = ConversionMetadata {
            mode: DurationMode::Fixed { len: 7 },
            source_len: 5,
            target_len: 7,
            ratio: 1.4,
            predicted_ratio: None,
            seed: 0,
            n_steps: 32,
            w1: 1.0,
            w2: 1.0,
        };
        let json = serde_json::to_string(&meta).unwrap();
        assert!(json.contains("\"mode\":\"fixed\"") && json.contains("\"len\":7"), "{json}");
        assert_eq!(serde_json::from_str::<ConversionMetadata>(&json).unwrap(), meta);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn requested_lengths_are_exact(src in 1usize..60, fixed in 1usize..60) {
            let model = AccentNormalizer::new(&tiny(), Ablation::None, 2, Precision::F32).unwrap();
            let sampler = SamplerConfig { n_steps: 1, seed: 0 };
            let inherit = ConvertOptions { mode: DurationMode::Inherit, sampler, ..ConvertOptions::default() };
            prop_assert_eq!(convert(&model, &source(src), &speaker(), &inherit).unwrap().features.rows(), src);
            let fixed_opts = ConvertOptions { mode: DurationMode::Fixed { len: fixed }, sampler, ..ConvertOptions::default() };
            prop_assert_eq!(convert(&model, &source(src), &speaker(), &fixed_opts).unwrap().features.rows(), fixed);
        }
    }
}
