use std::fs;

use cosynorm_core::datagen::{build_dataset, DatagenConfig, Manifest, Split, MANIFEST_FILE};
use cosynorm_core::flow::SamplerConfig;
use cosynorm_core::pipeline::eval::{edit_distance, evaluate};
use cosynorm_core::pipeline::{
    train, train_recognizer, Corpus, ConvertOptions, DurationMode, ModelConfig, RecognizerConfig, TrainConfig,
};

fn config() -> TrainConfig {
    TrainConfig {
        n_steps: 30,
        batch_size: 2,
        warmup_steps: 3,
        log_every: 0,
        val_every: 0,
        val_draws: 1,
        model: ModelConfig {
            encoder_dim: 16,
            encoder_layers: 1,
            decoder_dim: 16,
            decoder_layers: 1,
            duration_dim: 8,
            time_dim: 16,
            ..ModelConfig::default()
        },
        recognizer: RecognizerConfig {
            n_steps: 60,
            batch_size: 4,
            ..RecognizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn small_corpus(dir: &std::path::Path) {
    let datagen = DatagenConfig {
        n_speakers: 3,
        n_sentences: 24,
        n_val: 3,
        n_test: 4,
        min_per_speaker: 3,
        ..DatagenConfig::default()
    };
    build_dataset(&datagen, dir, 21).unwrap();
}

#[test]
fn evaluation_is_deterministic_and_reports_missing_files_per_row() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let corpus = Corpus::load(dir.path()).unwrap();
    let (model, _) = train(&config(), &corpus).unwrap();
    let recognizer = train_recognizer(&config(), &corpus).unwrap();
    let options = ConvertOptions {
        mode: DurationMode::Predict,
        sampler: SamplerConfig { n_steps: 4, seed: 1 },
        ..ConvertOptions::default()
    };

    let a = evaluate(&model, Some(&recognizer), dir.path(), Split::Test, options).unwrap();
    let b = evaluate(&model, Some(&recognizer), dir.path(), Split::Test, options).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.failures, 0);
    assert!(a.wer >= 0.0 && (-1.0..=1.0).contains(&a.speaker_cos));
    for (row, example) in a.rows.iter().zip(corpus.split(Split::Test)) {
        assert_eq!(row.utt_id, example.utt_id);
        let target = recognizer.transcribe(&example.target).unwrap();
        assert_eq!(row.target_edits, edit_distance(example.labels.symbols(), target.symbols()));
        assert_eq!(row.output_len, (row.predicted_ratio * row.source_len as f64).round().max(1.0) as usize);
    }

    let manifest = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    let victim = manifest.split(Split::Test).next().unwrap();
    fs::remove_file(manifest.resolve(&victim.target_feature_file)).unwrap();
    let c = evaluate(&model, Some(&recognizer), dir.path(), Split::Test, options).unwrap();
    assert_eq!(c.failures, 1);
    assert_eq!(c.utterances, a.utterances);
    let failed = c.rows.iter().find(|r| r.error.is_some()).unwrap();
    assert_eq!(failed.utt_id, victim.utt_id);
    assert!(c.to_jsonl().contains("\"error\""));
}

#[test]
fn saved_models_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let corpus = Corpus::load(dir.path()).unwrap();
    let cfg = config();
    let (model, report) = train(&cfg, &corpus).unwrap();
    let out = dir.path().join("model");
    cosynorm_core::pipeline::train::save_trained(&model, &cfg, &report, &out).unwrap();
    let (loaded, loaded_cfg) = cosynorm_core::pipeline::AccentNormalizer::load(&out).unwrap();
    assert_eq!(loaded_cfg, cfg);
    let example = corpus.split(Split::Val)[0];
    assert_eq!(
        loaded.content(&example.source).unwrap().frames,
        model.content(&example.source).unwrap().frames
    );
    let rec = train_recognizer(&cfg, &corpus).unwrap();
    rec.save(&dir.path().join("rec"), &cfg.recognizer).unwrap();
    let rec2 = cosynorm_core::pipeline::Recognizer::load(&dir.path().join("rec")).unwrap();
    assert_eq!(rec2.transcribe(&example.target).unwrap(), rec.transcribe(&example.target).unwrap());
}
