use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cosynorm_core::datagen::io::read_features;
use cosynorm_core::datagen::{DatasetBank, Manifest, BANK_FILE, MANIFEST_FILE};
use cosynorm_core::decoder::SpeakerEmbedding;
use cosynorm_core::flow::{euler_sample, DecoderField, GuidanceWeights, SamplerConfig};
use cosynorm_core::pipeline::AccentNormalizer;

const DATAGEN_TOML: &str = "n_speakers = 3\nn_sentences = 24\nn_val = 3\nn_test = 3\nmin_per_speaker = 3\n";
const TRAIN_TOML: &str = "n_steps = 20\nbatch_size = 2\nwarmup_steps = 2\nlog_every = 0\nval_every = 0\nval_draws = 1\n\
[model]\nencoder_dim = 16\nencoder_layers = 1\ndecoder_dim = 16\ndecoder_layers = 1\nduration_dim = 8\ntime_dim = 16\n\
[recognizer]\nn_steps = 20\nbatch_size = 2\n";

fn cosynorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosynorm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cosynorm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Builds a tiny corpus and model; returns the corpus and model directories.
fn workspace(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    let model = root.join("model");
    fs::write(root.join("datagen.toml"), DATAGEN_TOML).unwrap();
    fs::write(root.join("train.toml"), TRAIN_TOML).unwrap();
    ok(&["datagen", "--config", s(&root.join("datagen.toml")), "--out", s(&data), "--seed", "3"]);
    ok(&["train", "--config", s(&root.join("train.toml")), "--data", s(&data), "--out", s(&model)]);
    (data, model)
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = cosynorm(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cosynorm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cosynorm(&["convert", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let stdout = ok(&["selftest"]);
    for suite in ["ctc-oracle", "gradient-check", "rope-relative-position"] {
        assert!(stdout.contains(&format!("PASS {suite}")), "{stdout}");
    }
}

#[test]
fn runtime_errors_exit_1_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = cosynorm(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "n_stepz = 3\n").unwrap();
    let out = cosynorm(&["train", "--config", s(&bad), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn convert_eval_and_training_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, model) = workspace(root);
    for file in ["checkpoint.bin", "config.toml", "metrics.json"] {
        assert!(model.join(file).is_file(), "{file} missing");
    }

    let manifest = Manifest::load(&data.join(MANIFEST_FILE)).unwrap();
    let row = &manifest.rows[0];
    let input = manifest.resolve(&row.source_feature_file);
    let src_len = read_features(&input).unwrap().rows();
    let convert = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "convert",
            "--model",
            s(&model),
            "--data",
            s(&data),
            "--input",
            s(&input),
            "--speaker",
            &row.speaker_id,
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        cosynorm(&args)
    };

    let inherit = root.join("inherit.feat");
    assert!(convert(&inherit, &["--mode", "inherit", "--steps", "4"]).status.success());
    assert_eq!(read_features(&inherit).unwrap().rows(), src_len);
    let meta = fs::read_to_string(root.join("inherit.feat.json")).unwrap();
    assert!(meta.contains("\"mode\":\"inherit\"") && meta.contains(&format!("\"target_len\":{src_len}")));

    let fixed = root.join("fixed.feat");
    assert!(convert(&fixed, &["--mode", "fixed", "--fixed-len", "37", "--steps", "4"]).status.success());
    assert_eq!(read_features(&fixed).unwrap().rows(), 37);
    assert_eq!(convert(&fixed, &["--mode", "fixed", "--fixed-len", "0"]).status.code(), Some(1));
    assert_eq!(convert(&fixed, &["--mode", "fixed"]).status.code(), Some(1));

    let predicted = root.join("predict.feat");
    assert!(convert(&predicted, &["--mode", "predict", "--steps", "4"]).status.success());
    assert!(read_features(&predicted).unwrap().rows() >= 1);

    let unguided = root.join("unguided.feat");
    assert!(convert(&unguided, &["--w1", "0", "--w2", "0", "--steps", "6", "--seed", "9"]).status.success());
    let (normalizer, _) = AccentNormalizer::load(&model).unwrap();
    let bank = DatasetBank::load(&data.join(BANK_FILE)).unwrap();
    let speaker = SpeakerEmbedding::new(bank.speaker(&row.speaker_id).unwrap().signature.clone()).unwrap();
    let content = normalizer.content(&read_features(&input).unwrap()).unwrap();
    let field = DecoderField {
        decoder: &normalizer.decoder,
        store: &normalizer.store,
        content: &content.frames,
        speaker: &speaker,
    };
    let single = euler_sample(&field, src_len, GuidanceWeights::NONE, SamplerConfig { n_steps: 6, seed: 9 }).unwrap();
    let written = read_features(&unguided).unwrap();
    let as_f32: Vec<f64> = single.data().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(written.data(), as_f32.as_slice());

    let recognizer = root.join("recognizer");
    ok(&["train-recognizer", "--config", s(&root.join("train.toml")), "--data", s(&data), "--out", s(&recognizer)]);
    let report = root.join("eval.jsonl");
    let table = ok(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--recognizer",
        s(&recognizer),
        "--split",
        "test",
        "--steps",
        "2",
        "--report",
        s(&report),
    ]);
    assert!(table.contains("wer (converted)") && table.contains("speaker_cos"), "{table}");
    let lines = fs::read_to_string(&report).unwrap();
    let test_rows = manifest.rows.iter().filter(|r| r.split.to_string() == "test").count();
    assert_eq!(lines.lines().count(), test_rows);
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, model_a) = workspace(a.path());
    let (_, model_b) = workspace(b.path());
    assert_eq!(
        fs::read(a.path().join("data").join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join("data").join(MANIFEST_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(model_a.join("checkpoint.bin")).unwrap(),
        fs::read(model_b.join("checkpoint.bin")).unwrap()
    );
}
