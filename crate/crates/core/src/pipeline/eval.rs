use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::convert::{ConvertOptions, DurationMode};
use super::data::Example;
use super::model::{AccentNormalizer, Recognizer};
use crate::ctc::LabelSeq;
use crate::datagen::{extract_signature, DatasetBank, Manifest, Split, BANK_FILE, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Tensor};

/// Unit-cost edit distance between two symbol sequences.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    strsim::generic_levenshtein(&reference.to_vec(), &hypothesis.to_vec())
}

/// Edit distance divided by the reference length.
pub fn wer(reference: &LabelSeq, hypothesis: &LabelSeq) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("error rate of an empty reference is undefined".into()));
    }
    Ok(edit_distance(reference.symbols(), hypothesis.symbols()) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utt_id: String,
    pub speaker_id: String,
    pub mode: String,
    pub source_len: usize,
    pub target_len: usize,
    pub output_len: usize,
    pub true_ratio: f64,
    pub predicted_ratio: f64,
    pub ref_len: usize,
    /// Edits against the labels for converted output, the source and the
    /// native target.
    pub edits: usize,
    pub source_edits: usize,
    pub target_edits: usize,
    pub wer: f64,
    pub speaker_cos: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub mode: String,
    pub utterances: usize,
    pub failures: usize,
    /// Corpus-level error rates (total edits over total reference symbols).
    pub wer: f64,
    pub source_wer: f64,
    pub target_wer: f64,
    pub speaker_cos: f64,
    /// Mean absolute error of the predicted ratio.
    pub dur_ratio_mae: f64,
    pub mean_predicted_ratio: f64,
    /// Mean output length over native target length.
    pub mean_length_ratio: f64,
    pub rows: Vec<EvalRow>,
}

/// Scores converted output with `recognizer`, or with the model's own head
/// when none is given.
pub struct Evaluator<'a> {
    pub model: &'a AccentNormalizer,
    pub recognizer: Option<&'a Recognizer>,
    pub bank: &'a DatasetBank,
    pub options: ConvertOptions,
}

impl Evaluator<'_> {
    fn transcribe(&self, features: &Tensor) -> Result<LabelSeq> {
        match self.recognizer {
            Some(r) => r.transcribe(features),
            None => self.model.transcribe(features),
        }
    }

    pub fn evaluate_example(&self, example: &Example) -> Result<EvalRow> {
        let content = self.model.content(&example.source)?;
        let source_len = content.source_len;
        let predicted = self.model.predict_ratio(&content, &example.speaker, self.options.sampler)?;
        let output_len = match self.options.mode {
            DurationMode::Inherit => source_len,
            DurationMode::Predict => predicted.target_len(source_len),
            DurationMode::Fixed { len } => len,
        };
        self.options.mode.validate()?;
        let converted = self.model.generate(
            &content,
            &example.speaker,
            output_len,
            self.options.weights,
            self.options.sampler,
        )?;
        let labels = example.labels.symbols();
        let edits = edit_distance(labels, self.transcribe(&converted)?.symbols());
        let source_edits = edit_distance(labels, self.transcribe(&example.source)?.symbols());
        let target_edits = edit_distance(labels, self.transcribe(&example.target)?.symbols());
        let estimate = extract_signature(&converted, &self.bank.symbols, &self.bank.signatures())?;
        Ok(EvalRow {
            utt_id: example.utt_id.clone(),
            speaker_id: example.speaker_id.clone(),
            mode: self.options.mode.name().to_string(),
            source_len,
            target_len: example.target.rows(),
            output_len,
            true_ratio: example.true_ratio(),
            predicted_ratio: predicted.value(),
            ref_len: labels.len(),
            edits,
            source_edits,
            target_edits,
            wer: edits as f64 / labels.len() as f64,
            speaker_cos: cosine(&estimate, example.speaker.values()),
            error: None,
        })
    }

    /// Aggregates rows; rows carrying an error are counted but not scored.
    pub fn report(&self, split: Split, rows: Vec<EvalRow>) -> Result<EvalReport> {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        if ok.is_empty() {
            return Err(Error::InvalidArgument(format!("no {split} rows could be evaluated")));
        }
        let n = ok.len() as f64;
        let ref_total: usize = ok.iter().map(|r| r.ref_len).sum();
        let rate = |f: fn(&EvalRow) -> usize| ok.iter().map(|r| f(r)).sum::<usize>() as f64 / ref_total as f64;
        let mean = |f: fn(&EvalRow) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
        Ok(EvalReport {
            split,
            mode: self.options.mode.name().to_string(),
            utterances: rows.len(),
            failures: rows.len() - ok.len(),
            wer: rate(|r| r.edits),
            source_wer: rate(|r| r.source_edits),
            target_wer: rate(|r| r.target_edits),
            speaker_cos: mean(|r| r.speaker_cos),
            dur_ratio_mae: mean(|r| (r.predicted_ratio - r.true_ratio).abs()),
            mean_predicted_ratio: mean(|r| r.predicted_ratio),
            mean_length_ratio: mean(|r| r.output_len as f64 / r.target_len as f64),
            rows,
        })
    }

    pub fn evaluate_examples(&self, split: Split, examples: &[&Example]) -> Result<EvalReport> {
        let rows = examples
            .iter()
            .map(|e| self.evaluate_example(e).unwrap_or_else(|err| failed_row(&e.utt_id, &e.speaker_id, err)))
            .collect();
        self.report(split, rows)
    }
}

fn failed_row(utt_id: &str, speaker_id: &str, err: Error) -> EvalRow {
    EvalRow {
        utt_id: utt_id.to_string(),
        speaker_id: speaker_id.to_string(),
        error: Some(err.to_string()),
        ..EvalRow::default()
    }
}

/// Evaluates one split of the dataset at `data_dir`. Rows whose files cannot
/// be read are reported individually.
pub fn evaluate(
    model: &AccentNormalizer,
    recognizer: Option<&Recognizer>,
    data_dir: &Path,
    split: Split,
    options: ConvertOptions,
) -> Result<EvalReport> {
    let bank = DatasetBank::load(&data_dir.join(BANK_FILE))?;
    let manifest = Manifest::load(&data_dir.join(MANIFEST_FILE))?;
    let evaluator = Evaluator {
        model,
        recognizer,
        bank: &bank,
        options,
    };
    let rows: Vec<EvalRow> = manifest
        .split(split)
        .map(|row| {
            Example::load(&manifest, row, &bank)
                .and_then(|e| evaluator.evaluate_example(&e))
                .unwrap_or_else(|err| failed_row(&row.utt_id, &row.speaker_id, err))
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} has no rows")));
    }
    evaluator.report(split, rows)
}

impl EvalReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k:<22} {v}").expect("string write");
        line("split", self.split.to_string());
        line("mode", self.mode.clone());
        line("utterances", format!("{} ({} failed)", self.utterances, self.failures));
        line("wer (converted)", format!("{:.4}", self.wer));
        line("wer (source)", format!("{:.4}", self.source_wer));
        line("wer (native target)", format!("{:.4}", self.target_wer));
        line("speaker_cos", format!("{:.4}", self.speaker_cos));
        line("dur_ratio_mae", format!("{:.4}", self.dur_ratio_mae));
        line("mean predicted ratio", format!("{:.4}", self.mean_predicted_ratio));
        line("output/target length", format!("{:.4}", self.mean_length_ratio));
        out
    }
}
