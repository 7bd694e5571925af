use std::path::Path;

use crate::ctc::LabelSeq;
use crate::datagen::io::{read_features, read_labels};
use crate::datagen::io::ManifestEntry;
use crate::datagen::{DatasetBank, Manifest, Split, BANK_FILE, MANIFEST_FILE};
use crate::decoder::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One paired utterance held in memory.
#[derive(Clone, Debug)]
pub struct Example {
    pub utt_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub labels: LabelSeq,
    pub source: Tensor,
    pub target: Tensor,
    pub speaker: SpeakerEmbedding,
}

impl Example {
    /// Reads the files referenced by one manifest row.
    pub fn load(manifest: &Manifest, row: &ManifestEntry, bank: &DatasetBank) -> Result<Self> {
        let speaker = bank
            .speaker(&row.speaker_id)
            .ok_or_else(|| Error::format("manifest", format!("{}: unknown speaker {}", row.utt_id, row.speaker_id)))?;
        Ok(Self {
            utt_id: row.utt_id.clone(),
            speaker_id: row.speaker_id.clone(),
            split: row.split,
            labels: read_labels(&manifest.resolve(&row.label_file))?,
            source: read_features(&manifest.resolve(&row.source_feature_file))?,
            target: read_features(&manifest.resolve(&row.target_feature_file))?,
            speaker: SpeakerEmbedding::new(speaker.signature.clone())?,
        })
    }

    /// Target frames per source frame.
    pub fn true_ratio(&self) -> f64 {
        self.target.rows() as f64 / self.source.rows() as f64
    }
}

pub struct Corpus {
    pub bank: DatasetBank,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let bank = DatasetBank::load(&dir.join(BANK_FILE))?;
        let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
        let examples = manifest
            .rows
            .iter()
            .map(|row| Example::load(&manifest, row, &bank))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bank, examples })
    }

    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }
}
