use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, ModelConfig, RecognizerConfig, TrainConfig};
use crate::ctc::{ctc_greedy_decode, LabelSeq};
use crate::decoder::{Decoder, SpeakerEmbedding};
use crate::duration::DurationPredictor;
use crate::encoder::{ContentFeatures, CtcHead, Encoder};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, ParamStore, Precision, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// Encoder, CTC head, velocity decoder and duration predictor sharing one
/// parameter store.
pub struct AccentNormalizer {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub ctc_head: CtcHead,
    pub decoder: Decoder,
    pub duration: DurationPredictor,
}

impl AccentNormalizer {
    pub fn new(config: &ModelConfig, ablation: Ablation, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let encoder = Encoder::new(&mut store, "encoder", config.encoder(), &mut rng)?;
        let ctc_head = CtcHead::new(&mut store, "ctc_head", config.encoder_dim, config.vocab_size, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", config.decoder(ablation), &mut rng)?;
        let duration = DurationPredictor::new(&mut store, "duration", config.duration(), &mut rng)?;
        Ok(Self {
            config: config.clone(),
            ablation,
            store,
            encoder,
            ctc_head,
            decoder,
            duration,
        })
    }

    /// Rebuilds the architecture from `config.toml` and loads `checkpoint.bin`.
    pub fn load(dir: &Path) -> Result<(Self, TrainConfig)> {
        let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let mut model = Self::new(&config.model, config.ablate, 0, Precision::F32)?;
        checkpoint::load_into(&mut model.store, &dir.join(CHECKPOINT_FILE))?;
        Ok((model, config))
    }

    pub fn content(&self, source: &Tensor) -> Result<ContentFeatures> {
        self.encoder.encode(&self.store, source)
    }

    /// Speaker input for the duration predictor; zeros when the speaker
    /// pathway is ablated.
    pub fn duration_speaker(&self, speaker: &SpeakerEmbedding) -> Vec<f64> {
        if self.ablation == Ablation::Speaker {
            vec![0.0; self.config.speaker_dim]
        } else {
            speaker.values().to_vec()
        }
    }

    pub fn check_speaker(&self, speaker: &SpeakerEmbedding) -> Result<()> {
        if speaker.dim() != self.config.speaker_dim {
            return Err(Error::Shape(format!(
                "speaker embedding has {} values, model expects {}",
                speaker.dim(),
                self.config.speaker_dim
            )));
        }
        Ok(())
    }
}

/// Encoder plus CTC head trained only on native speech; transcribes
/// converted output independently of the converter.
pub struct Recognizer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: CtcHead,
}

pub const RECOGNIZER_CONFIG_FILE: &str = "recognizer.toml";

impl Recognizer {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(Precision::F32);
        let encoder = Encoder::new(&mut store, "encoder", config.encoder(), &mut rng)?;
        let head = CtcHead::new(&mut store, "ctc_head", config.encoder_dim, config.vocab_size, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            head,
        })
    }

    pub fn transcribe(&self, features: &Tensor) -> Result<LabelSeq> {
        let content = self.encoder.encode(&self.store, features)?;
        let lattice = self.head.lattice(&self.store, &content)?;
        Ok(ctc_greedy_decode(&lattice))
    }

    pub fn save(&self, dir: &Path, settings: &RecognizerConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = TrainConfig {
            model: self.config.clone(),
            recognizer: settings.clone(),
            ..TrainConfig::default()
        };
        config.save(&dir.join(RECOGNIZER_CONFIG_FILE))?;
        checkpoint::save(&self.store, &dir.join(CHECKPOINT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::load(&dir.join(RECOGNIZER_CONFIG_FILE))?;
        let mut r = Self::new(&config.model, 0)?;
        checkpoint::load_into(&mut r.store, &dir.join(CHECKPOINT_FILE))?;
        Ok(r)
    }
}

impl AccentNormalizer {
    /// Greedy transcription with the model's own CTC head.
    pub fn transcribe(&self, features: &Tensor) -> Result<LabelSeq> {
        let content = self.content(features)?;
        let lattice = self.ctc_head.lattice(&self.store, &content)?;
        Ok(ctc_greedy_decode(&lattice))
    }
}
