//! Replays the checked-in fuzz seeds, plus truncated and bit-flipped
//! variants, through the same checks as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use cosynorm_core::datagen::io::{
    decode_features, encode_features, encode_labels, encode_manifest, parse_labels, parse_manifest,
    parse_manifest_line,
};
use cosynorm_core::datagen::DatagenConfig;
use cosynorm_core::numerics::checkpoint::{decode, encode_records};
use cosynorm_core::pipeline::TrainConfig;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

/// Each seed, every prefix of it, and every single-bit flip of its first
/// 64 bytes.
fn variants(target: &str) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for seed in seeds(target) {
        for len in 0..seed.len() {
            out.push(seed[..len].to_vec());
        }
        for byte in 0..seed.len().min(64) {
            for bit in 0..8 {
                let mut v = seed.clone();
                v[byte] ^= 1 << bit;
                out.push(v);
            }
        }
        out.push(seed);
    }
    out
}

fn check_checkpoint(data: &[u8]) {
    if let Ok(records) = decode(data) {
        let bytes = encode_records(records.iter().map(|(n, t)| (n.as_str(), t)));
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), records.len());
        assert_eq!(encode_records(again.iter().map(|(n, t)| (n.as_str(), t))), bytes);
    }
}

fn check_features(data: &[u8]) {
    if let Ok(features) = decode_features(data) {
        assert!(features.is_finite());
        assert_eq!(encode_features(&features).unwrap(), data);
    }
}

fn check_labels(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(labels) = parse_labels(text) {
            assert_eq!(parse_labels(&encode_labels(&labels)).unwrap(), labels);
        }
    }
}

fn check_manifest(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(row) = parse_manifest_line(text) {
            let rows = vec![row];
            assert_eq!(parse_manifest(&encode_manifest(&rows)).unwrap(), rows);
        }
        if let Ok(rows) = parse_manifest(text) {
            assert_eq!(parse_manifest(&encode_manifest(&rows)).unwrap(), rows);
        }
    }
}

fn check_config(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = TrainConfig::from_toml(text) {
            assert_eq!(TrainConfig::from_toml(&config.to_toml()).unwrap(), config);
        }
        let _ = DatagenConfig::from_toml(text);
    }
}

#[test]
fn checkpoint_seeds() {
    let all = variants("checkpoint");
    assert!(all.iter().any(|v| decode(v).is_ok()));
    all.iter().for_each(|v| check_checkpoint(v));
}

#[test]
fn feature_file_seeds() {
    let all = variants("feature_file");
    assert!(all.iter().any(|v| decode_features(v).is_ok()));
    all.iter().for_each(|v| check_features(v));
}

#[test]
fn label_file_seeds() {
    variants("label_file").iter().for_each(|v| check_labels(v));
}

#[test]
fn manifest_line_seeds() {
    let all = variants("manifest_line");
    assert!(all
        .iter()
        .any(|v| std::str::from_utf8(v).is_ok_and(|t| parse_manifest_line(t).is_ok())));
    all.iter().for_each(|v| check_manifest(v));
}

#[test]
fn config_seeds() {
    let all = variants("config");
    assert!(all
        .iter()
        .any(|v| std::str::from_utf8(v).is_ok_and(|t| TrainConfig::from_toml(t).is_ok())));
    all.iter().for_each(|v| check_config(v));
}
