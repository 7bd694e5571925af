//! Synthetic paired corpus: native utterances, accented counterparts built by
//! time-stretching and symbol substitution, accentedness scoring, prompt
//! filtering, balanced pairing and a sentence-level split.

pub mod io;
pub mod scoring;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::derived_rng;

pub use io::{Manifest, ManifestEntry, Split};
pub use scoring::{accent_score, extract_signature};

pub const NATIVE_ACCENT: &str = "native";
pub const DEFAULT_N_VAL: usize = 50;
pub const DEFAULT_N_TEST: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub n_speakers: usize,
    pub n_sentences: usize,
    pub n_l2_speakers: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    /// Symbol inventory size including the blank.
    pub vocab_size: usize,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_std: f64,
    pub stretch: f64,
    pub jitter: f64,
    pub substitutions_per_accent: usize,
    pub substitution_strength: f64,
    pub score_threshold: f64,
    pub min_per_speaker: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_sentences: 80,
            n_l2_speakers: 4,
            n_val: 8,
            n_test: 12,
            feature_dim: 24,
            vocab_size: 10,
            min_label_len: 4,
            max_label_len: 8,
            min_frames: 3,
            max_frames: 6,
            noise_std: 0.05,
            stretch: 1.3,
            jitter: 0.05,
            substitutions_per_accent: 3,
            substitution_strength: 0.6,
            score_threshold: 0.5,
            min_per_speaker: 10,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_speakers == 0 || self.n_l2_speakers == 0 {
            return fail("need at least one native and one accented speaker".into());
        }
        if self.n_sentences <= self.n_val + self.n_test {
            return fail(format!(
                "{} sentences cannot hold {} validation and {} test sentences plus training data",
                self.n_sentences, self.n_val, self.n_test
            ));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.vocab_size < 3 {
            return fail("vocab_size must be at least 3 to avoid forced repeats".into());
        }
        if self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            return fail("label length range is empty".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail("frames-per-symbol range is empty".into());
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be non-negative".into());
        }
        if self.substitutions_per_accent >= self.vocab_size {
            return fail("too many substitutions for the symbol inventory".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return fail("score_threshold must lie in [0, 1]".into());
        }
        AccentRule {
            accent_id: "check".into(),
            stretch: self.stretch,
            jitter: self.jitter,
            substitutions: BTreeMap::new(),
        }
        .validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            noise_std: self.noise_std,
        }
    }
}

/// Per-symbol base vectors shared by all speakers. Row 0 (blank) is unused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolBank {
    pub feature_dim: usize,
    pub bases: Vec<Vec<f64>>,
    pub mean_frames_per_symbol: f64,
}

impl SymbolBank {
    pub fn generate<R: Rng>(vocab_size: usize, feature_dim: usize, mean_frames_per_symbol: f64, rng: &mut R) -> Self {
        let scale = 2.0 / (feature_dim as f64).sqrt();
        let mut bases = vec![vec![0.0; feature_dim]];
        for _ in 1..vocab_size {
            bases.push((0..feature_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect());
        }
        Self {
            feature_dim,
            bases,
            mean_frames_per_symbol,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.bases.len()
    }

    pub fn base(&self, symbol: usize) -> &[f64] {
        &self.bases[symbol]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub speaker_id: String,
    /// Unit vector, added to every frame the speaker produces.
    pub signature: Vec<f64>,
}

impl ToySpeaker {
    /// Random unit-norm signatures whose pairwise cosines stay below 0.5.
    pub fn generate_many<R: Rng>(ids: &[String], dim: usize, rng: &mut R) -> Vec<Self> {
        let mut out: Vec<ToySpeaker> = Vec::with_capacity(ids.len());
        for id in ids {
            let signature = loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue;
                }
                let v: Vec<f64> = v.into_iter().map(|x| x / norm).collect();
                let close = out
                    .iter()
                    .any(|s| crate::numerics::cosine(&s.signature, &v) > 0.5);
                if !close || dim < 4 {
                    break v;
                }
            };
            out.push(ToySpeaker {
                speaker_id: id.clone(),
                signature,
            });
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccentRule {
    pub accent_id: String,
    pub stretch: f64,
    pub jitter: f64,
    /// Additive perturbation applied to frames of each mapped symbol.
    pub substitutions: BTreeMap<usize, Vec<f64>>,
}

impl AccentRule {
    pub fn identity() -> Self {
        Self {
            accent_id: NATIVE_ACCENT.into(),
            stretch: 1.0,
            jitter: 0.0,
            substitutions: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stretch > 0.0 && self.stretch.is_finite()) {
            return Err(Error::Config(format!("stretch must be positive, got {}", self.stretch)));
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 0.2], got {}", self.jitter)));
        }
        Ok(())
    }

    /// Interpolates between no accent (`amount = 0`) and this rule.
    pub fn scaled(&self, amount: f64) -> Self {
        Self {
            accent_id: self.accent_id.clone(),
            stretch: 1.0 + amount * (self.stretch - 1.0),
            jitter: self.jitter,
            substitutions: self
                .substitutions
                .iter()
                .map(|(&s, v)| (s, v.iter().map(|x| amount * x).collect()))
                .collect(),
        }
    }

    /// Moves `from` a fraction `strength` of the way towards `to`.
    pub fn generate<R: Rng>(accent_id: &str, bank: &SymbolBank, config: &DatagenConfig, rng: &mut R) -> Self {
        let mut symbols: Vec<usize> = (1..bank.vocab_size()).collect();
        symbols.shuffle(rng);
        let mut substitutions = BTreeMap::new();
        for &from in symbols.iter().take(config.substitutions_per_accent) {
            let to = loop {
                let c = rng.random_range(1..bank.vocab_size());
                if c != from {
                    break c;
                }
            };
            let delta = bank
                .base(to)
                .iter()
                .zip(bank.base(from))
                .map(|(t, f)| config.substitution_strength * (t - f))
                .collect();
            substitutions.insert(from, delta);
        }
        Self {
            accent_id: accent_id.into(),
            stretch: config.stretch,
            jitter: config.jitter,
            substitutions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_std: f64,
}

/// Native rendering with its frame-level symbol alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct NativeUtterance {
    pub features: Tensor,
    pub alignment: Vec<usize>,
}

/// Renders each symbol as `min_frames..=max_frames` frames of its base vector
/// plus the speaker signature plus Gaussian noise.
///
/// The random draws do not depend on the speaker, so two speakers rendered
/// with the same stream differ exactly by their signatures.
pub fn synth_native<R: Rng>(
    bank: &SymbolBank,
    speaker: &ToySpeaker,
    labels: &LabelSeq,
    params: SynthParams,
    rng: &mut R,
) -> Result<NativeUtterance> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty label sequence".into()));
    }
    if speaker.signature.len() != bank.feature_dim {
        return Err(Error::Shape("speaker signature width differs from the feature dimension".into()));
    }
    if labels.max_symbol().is_some_and(|m| m >= bank.vocab_size()) {
        return Err(Error::InvalidArgument("label symbol outside the symbol bank".into()));
    }
    let noise = Normal::new(0.0, params.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
    let dim = bank.feature_dim;
    let mut data = Vec::new();
    let mut alignment = Vec::new();
    for &sym in labels.symbols() {
        let frames = rng.random_range(params.min_frames..=params.max_frames);
        for _ in 0..frames {
            for c in 0..dim {
                data.push(bank.base(sym)[c] + speaker.signature[c] + noise.sample(rng));
            }
            alignment.push(sym);
        }
    }
    Ok(NativeUtterance {
        features: Tensor::matrix(alignment.len(), dim, data)?,
        alignment,
    })
}

/// Time-stretches by `stretch · (1 + jitter · u)`, `u ~ U[-1, 1]`, with linear
/// interpolation, then adds the rule's perturbation to frames of mapped
/// symbols. Output length is `round(factor · T)`, at least one frame.
pub fn accentify<R: Rng>(native: &NativeUtterance, rule: &AccentRule, rng: &mut R) -> Result<Tensor> {
    rule.validate()?;
    let t_in = native.features.rows();
    if t_in == 0 || native.alignment.len() != t_in {
        return Err(Error::Shape("alignment must cover every frame".into()));
    }
    let u: f64 = rng.random_range(-1.0..=1.0);
    let factor = rule.stretch * (1.0 + rule.jitter * u);
    let t_out = ((factor * t_in as f64).round() as usize).max(1);
    let dim = native.features.cols();
    let mut out = Tensor::zeros(&[t_out, dim]);
    for j in 0..t_out {
        let pos = if t_out == t_in {
            j as f64
        } else {
            ((j as f64 + 0.5) * t_in as f64 / t_out as f64 - 0.5).clamp(0.0, (t_in - 1) as f64)
        };
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let row = out.row_mut(j);
        if frac == 0.0 {
            row.copy_from_slice(native.features.row(lo));
        } else {
            let (a, b) = (native.features.row(lo), native.features.row(lo + 1));
            for c in 0..dim {
                row[c] = (1.0 - frac) * a[c] + frac * b[c];
            }
        }
        let sym = native.alignment[pos.round() as usize];
        if let Some(delta) = rule.substitutions.get(&sym) {
            for (x, d) in row.iter_mut().zip(delta) {
                *x += d;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub utt_id: String,
    pub speaker_id: String,
    pub accent_id: String,
    pub score: f64,
}

/// Keeps prompts scoring above `threshold`, topping up each speaker to
/// `min(min_per_speaker, available)` with its best remaining prompts.
/// Ties go to the smaller `utt_id`; the result is sorted by `utt_id`.
pub fn filter_prompts(entries: &[PromptScore], threshold: f64, min_per_speaker: usize) -> Result<Vec<PromptScore>> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no prompts to filter".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&PromptScore>> = BTreeMap::new();
    for e in entries {
        by_speaker.entry(&e.speaker_id).or_default().push(e);
    }
    let mut kept: Vec<PromptScore> = Vec::new();
    for (_, mut items) in by_speaker {
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.utt_id.cmp(&b.utt_id)));
        let above = items.iter().filter(|e| e.score > threshold).count();
        let keep = above.max(min_per_speaker.min(items.len()));
        kept.extend(items.into_iter().take(keep).cloned());
    }
    kept.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then the first `n_val` items go to validation, the next
/// `n_test` to test and the rest to training. Each part keeps input order.
pub fn split_subsets<T: Clone + Ord, R: Rng>(items: &[T], n_val: usize, n_test: usize, rng: &mut R) -> Result<Partition<T>> {
    if items.len() <= n_val + n_test {
        return Err(Error::InvalidArgument(format!(
            "{} items cannot be split into {n_val} validation and {n_test} test items plus training",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let pick = |range: std::ops::Range<usize>| {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<T>>()
    };
    Ok(Partition {
        val: pick(0..n_val),
        test: pick(n_val..n_val + n_test),
        train: pick(n_val + n_test..items.len()),
    })
}

/// Assigns each item a prompt so that every prompt speaker is used
/// `⌊n/S⌋` or `⌈n/S⌉` times. Returns prompt indices aligned with `items`.
pub fn pair_and_balance<T, R: Rng>(items: &[T], prompts: &[PromptScore], rng: &mut R) -> Result<Vec<usize>> {
    if items.is_empty() || prompts.is_empty() {
        return Err(Error::InvalidArgument("pairing needs items and prompts".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        by_speaker.entry(&p.speaker_id).or_default().push(i);
    }
    let mut speakers: Vec<&Vec<usize>> = by_speaker.values().collect();
    speakers.shuffle(rng);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut assignment = vec![0; items.len()];
    for (k, &item) in order.iter().enumerate() {
        let pool = speakers[k % speakers.len()];
        assignment[item] = pool[rng.random_range(0..pool.len())];
    }
    Ok(assignment)
}

/// Everything needed to interpret a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBank {
    pub seed: u64,
    pub config: DatagenConfig,
    pub symbols: SymbolBank,
    pub speakers: Vec<ToySpeaker>,
    pub l2_speakers: Vec<ToySpeaker>,
    pub rules: Vec<AccentRule>,
}

pub const BANK_FILE: &str = "bank.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";

impl DatasetBank {
    pub fn generate(config: &DatagenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(seed, "bank", "");
        let mean_frames = (config.min_frames + config.max_frames) as f64 / 2.0;
        let symbols = SymbolBank::generate(config.vocab_size, config.feature_dim, mean_frames, &mut rng);
        let ids: Vec<String> = (0..config.n_speakers)
            .map(native_speaker_id)
            .chain((0..config.n_l2_speakers).map(l2_speaker_id))
            .collect();
        let mut all = ToySpeaker::generate_many(&ids, config.feature_dim, &mut rng);
        let l2_speakers = all.split_off(config.n_speakers);
        let rules = (0..config.n_l2_speakers)
            .map(|i| AccentRule::generate(&format!("accent{i}"), &symbols, config, &mut rng))
            .collect();
        Ok(Self {
            seed,
            config: config.clone(),
            symbols,
            speakers: all,
            l2_speakers,
            rules,
        })
    }

    pub fn speaker(&self, id: &str) -> Option<&ToySpeaker> {
        self.speakers.iter().chain(&self.l2_speakers).find(|s| s.speaker_id == id)
    }

    pub fn rule(&self, accent_id: &str) -> Option<&AccentRule> {
        self.rules.iter().find(|r| r.accent_id == accent_id)
    }

    pub fn signatures(&self) -> Vec<&[f64]> {
        self.speakers
            .iter()
            .chain(&self.l2_speakers)
            .map(|s| s.signature.as_slice())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("bank serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("bank", format!("{}: {e}", path.display())))
    }
}

pub fn native_speaker_id(i: usize) -> String {
    format!("spk{i:02}")
}

pub fn l2_speaker_id(i: usize) -> String {
    format!("l2spk{i:02}")
}

pub fn utt_id(speaker_id: &str, sentence: usize) -> String {
    format!("{speaker_id}-{sentence:04}")
}

/// Sentence texts: symbols `1..vocab`, no symbol repeated back to back.
pub fn generate_sentences(config: &DatagenConfig, seed: u64) -> Vec<LabelSeq> {
    (0..config.n_sentences)
        .map(|j| {
            let mut rng = derived_rng(seed, "sentence", &j.to_string());
            let len = rng.random_range(config.min_label_len..=config.max_label_len);
            let mut symbols: Vec<usize> = Vec::with_capacity(len);
            while symbols.len() < len {
                let s = rng.random_range(1..config.vocab_size);
                if symbols.last() != Some(&s) {
                    symbols.push(s);
                }
            }
            LabelSeq::new(symbols).expect("non-blank symbols")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub rows: usize,
    pub prompts_scored: usize,
    pub prompts_retained: usize,
    pub prompt_usage: BTreeMap<String, usize>,
    pub mean_length_ratio: f64,
}

/// Runs split, prompt scoring and filtering, pairing and synthesis, and
/// writes the corpus under `out`.
pub fn build_dataset(config: &DatagenConfig, out: &Path, seed: u64) -> Result<DatasetSummary> {
    let bank = DatasetBank::generate(config, seed)?;
    let params = config.synth_params();
    let sentences = generate_sentences(config, seed);

    let sentence_ids: Vec<usize> = (0..config.n_sentences).collect();
    let partition = split_subsets(&sentence_ids, config.n_val, config.n_test, &mut derived_rng(seed, "split", ""))?;
    let mut split_of = vec![Split::Train; config.n_sentences];
    for &j in &partition.val {
        split_of[j] = Split::Val;
    }
    for &j in &partition.test {
        split_of[j] = Split::Test;
    }

    let mut scored = Vec::new();
    for (speaker, rule) in bank.l2_speakers.iter().zip(&bank.rules) {
        for (j, labels) in sentences.iter().enumerate() {
            let id = utt_id(&speaker.speaker_id, j);
            let mut rng = derived_rng(seed, "prompt", &id);
            let intensity: f64 = rng.random();
            let native = synth_native(&bank.symbols, speaker, labels, params, &mut rng)?;
            let accented = accentify(&native, &rule.scaled(intensity), &mut rng)?;
            scored.push(PromptScore {
                utt_id: id,
                speaker_id: speaker.speaker_id.clone(),
                accent_id: rule.accent_id.clone(),
                score: accent_score(&accented, &bank.symbols, &bank.rules)?,
            });
        }
    }
    let retained = filter_prompts(&scored, config.score_threshold, config.min_per_speaker)?;

    let items: Vec<(usize, usize)> = (0..config.n_speakers)
        .flat_map(|s| (0..config.n_sentences).map(move |j| (s, j)))
        .collect();
    let assignment = pair_and_balance(&items, &retained, &mut derived_rng(seed, "pair", ""))?;

    let feature_dir = out.join("features");
    let label_dir = out.join("labels");
    for dir in [out, &feature_dir, &label_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rows = Vec::with_capacity(items.len());
    let mut usage: BTreeMap<String, usize> = BTreeMap::new();
    let mut ratio_sum = 0.0;
    for (&(s, j), &prompt_idx) in items.iter().zip(&assignment) {
        let speaker = &bank.speakers[s];
        let id = utt_id(&speaker.speaker_id, j);
        let prompt = &retained[prompt_idx];
        *usage.entry(prompt.speaker_id.clone()).or_default() += 1;
        let rule = bank.rule(&prompt.accent_id).expect("prompt accents come from the bank");
        let mut rng = derived_rng(seed, "utt", &id);
        let target = synth_native(&bank.symbols, speaker, &sentences[j], params, &mut rng)?;
        let source = accentify(&target, rule, &mut rng)?;
        ratio_sum += source.rows() as f64 / target.features.rows() as f64;

        let row = ManifestEntry {
            utt_id: id.clone(),
            speaker_id: speaker.speaker_id.clone(),
            accent_id: rule.accent_id.clone(),
            label_file: format!("labels/{id}.lab"),
            source_feature_file: format!("features/{id}.src.feat"),
            target_feature_file: format!("features/{id}.tgt.feat"),
            split: split_of[j],
            accent_score: accent_score(&source, &bank.symbols, &bank.rules)?,
        };
        io::write_labels(&out.join(&row.label_file), &sentences[j])?;
        io::write_features(&out.join(&row.source_feature_file), &source)?;
        io::write_features(&out.join(&row.target_feature_file), &target.features)?;
        rows.push(row);
    }

    io::write_manifest(&out.join(MANIFEST_FILE), &rows)?;
    let prompts_text: String = retained
        .iter()
        .map(|p| serde_json::to_string(p).expect("prompt rows serialize") + "\n")
        .collect();
    let prompts_path = out.join(PROMPTS_FILE);
    fs::write(&prompts_path, prompts_text).map_err(|e| Error::io(&prompts_path, e))?;
    bank.save(&out.join(BANK_FILE))?;

    let summary = DatasetSummary {
        rows: rows.len(),
        prompts_scored: scored.len(),
        prompts_retained: retained.len(),
        prompt_usage: usage,
        mean_length_ratio: ratio_sum / rows.len() as f64,
    };
    info!(
        "wrote {} pairs to {} ({} of {} prompts retained, mean source/target length {:.3})",
        summary.rows,
        out.display(),
        summary.prompts_retained,
        summary.prompts_scored,
        summary.mean_length_ratio
    );
    Ok(summary)
}

/// Sentence ids by split, recovered from a manifest.
pub fn sentences_by_split(rows: &[ManifestEntry]) -> BTreeMap<Split, BTreeSet<String>> {
    let mut out: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for r in rows {
        let sentence = r.utt_id.rsplit('-').next().unwrap_or_default().to_string();
        out.entry(r.split).or_default().insert(sentence);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank() -> DatasetBank {
        DatasetBank::generate(&DatagenConfig::default(), 5).unwrap()
    }

    fn labels(v: &[usize]) -> LabelSeq {
        LabelSeq::new(v.to_vec()).unwrap()
    }

    #[test]
    fn fixed_frames_give_exact_length() {
        let b = bank();
        let params = SynthParams {
            min_frames: 4,
            max_frames: 4,
            noise_std: 0.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = synth_native(&b.symbols, &b.speakers[0], &labels(&[1, 2, 3, 4]), params, &mut rng).unwrap();
        assert_eq!(u.features.shape(), &[16, 24]);
        assert_eq!(u.alignment, vec![1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4]);
    }

    #[test]
    fn synthesis_is_deterministic_and_speakers_differ_by_signature() {
        let b = bank();
        let params = DatagenConfig::default().synth_params();
        let l = labels(&[5, 2, 7]);
        let run = |s: usize| {
            synth_native(&b.symbols, &b.speakers[s], &l, params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
        };
        assert_eq!(run(0), run(0));
        let (a, c) = (run(0), run(1));
        assert_eq!(a.alignment, c.alignment);
        for (ra, rc) in a.features.iter_rows().zip(c.features.iter_rows()) {
            for k in 0..24 {
                let want = b.speakers[0].signature[k] - b.speakers[1].signature[k];
                assert!((ra[k] - rc[k] - want).abs() < 1e-12);
            }
        }
        assert!(synth_native(&b.symbols, &b.speakers[0], &labels(&[]), params, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn accentify_length_and_identity() {
        let b = bank();
        let native = NativeUtterance {
            features: crate::numerics::Init::Normal(1.0).build(&[100, 24], &mut ChaCha8Rng::seed_from_u64(2)),
            alignment: vec![1; 100],
        };
        let rule = AccentRule {
            jitter: 0.0,
            ..b.rules[0].clone()
        };
        let out = accentify(&native, &rule, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.rows(), 130);
        let same = accentify(&native, &AccentRule::identity(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(same, native.features);
        let again = accentify(&native, &b.rules[0], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, accentify(&native, &b.rules[0], &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        let bad = AccentRule {
            jitter: 0.3,
            ..b.rules[0].clone()
        };
        assert!(accentify(&native, &bad, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn substitutions_hit_only_mapped_symbols() {
        let b = bank();
        let rule = &b.rules[0];
        let (&mapped, delta) = rule.substitutions.iter().next().unwrap();
        let other = (1..10).find(|s| !rule.substitutions.contains_key(s)).unwrap();
        let native = NativeUtterance {
            features: Tensor::zeros(&[4, 24]),
            alignment: vec![mapped, mapped, other, other],
        };
        let flat = AccentRule {
            stretch: 1.0,
            jitter: 0.0,
            ..rule.clone()
        };
        let out = accentify(&native, &flat, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.row(0), delta.as_slice());
        assert!(out.row(3).iter().all(|&x| x == 0.0));
    }

    fn score(id: &str, spk: &str, s: f64) -> PromptScore {
        PromptScore {
            utt_id: id.into(),
            speaker_id: spk.into(),
            accent_id: "a".into(),
            score: s,
        }
    }

    #[test]
    fn filter_rules() {
        let kept = filter_prompts(&[score("u1", "x", 0.6), score("u2", "x", 0.4)], 0.5, 0).unwrap();
        assert_eq!(kept, vec![score("u1", "x", 0.6)]);
        let low: Vec<_> = (0..5).map(|i| score(&format!("u{i}"), "x", 0.3)).collect();
        let kept = filter_prompts(&low, 0.5, 3).unwrap();
        assert_eq!(kept.iter().map(|p| p.utt_id.as_str()).collect::<Vec<_>>(), ["u0", "u1", "u2"]);
        let kept = filter_prompts(&[score("b", "x", 0.2), score("a", "x", 0.1)], 0.5, 1).unwrap();
        assert_eq!(kept[0].utt_id, "b");
        assert!(filter_prompts(&[], 0.5, 1).is_err());
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ids: Vec<usize> = (0..200).collect();
        let p = split_subsets(&ids, DEFAULT_N_VAL, DEFAULT_N_TEST, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (70, 50, 80));
        let mut all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        let q = split_subsets(&ids, 50, 80, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(p, q);
        assert!(split_subsets(&ids[..130], 50, 80, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn pairing_is_balanced() {
        let prompts: Vec<_> = ["a", "b", "c"]
            .iter()
            .flat_map(|s| (0..4).map(move |i| score(&format!("{s}{i}"), s, 0.9)))
            .collect();
        let items: Vec<usize> = (0..10).collect();
        let assign = pair_and_balance(&items, &prompts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &assign {
            *counts.entry(prompts[i].speaker_id.as_str()).or_default() += 1;
        }
        let mut c: Vec<usize> = counts.values().copied().collect();
        c.sort_unstable();
        assert_eq!(c, vec![3, 3, 4]);
        assert_eq!(assign, pair_and_balance(&items, &prompts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
        let single = pair_and_balance(&items, &prompts[..2], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(single.iter().all(|&i| prompts[i].speaker_id == "a"));
    }

    #[test]
    fn sentences_have_no_adjacent_repeats() {
        for l in generate_sentences(&DatagenConfig::default(), 3) {
            assert!((4..=8).contains(&l.len()));
            assert!(l.symbols().windows(2).all(|w| w[0] != w[1]));
            assert_eq!(l.min_frames(), l.len());
        }
    }

    #[test]
    fn config_validation() {
        assert!(DatagenConfig::default().validate().is_ok());
        let c = DatagenConfig {
            n_sentences: 20,
            ..DatagenConfig::default()
        };
        assert!(c.validate().is_err());
        let c = DatagenConfig {
            jitter: 0.5,
            ..DatagenConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
