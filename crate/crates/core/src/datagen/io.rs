//! On-disk formats: feature files, label files and the JSONL manifest.
//!
//! A feature file is `u32 T`, `u32 D` (little-endian) followed by `T × D`
//! little-endian `f32` values in row-major order. A label file holds one line
//! of space-separated symbol ids.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAX_FEATURE_VALUES: usize = 1 << 28;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.rank() != 2 || features.rows() == 0 || features.cols() == 0 {
        return Err(Error::Shape(format!(
            "feature sequences must be non-empty matrices, got {:?}",
            features.shape()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * features.len());
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let header = bytes
        .get(..8)
        .ok_or_else(|| Error::format("feature file", "missing header"))?;
    let rows = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(header[4..].try_into().expect("4 bytes")) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format("feature file", format!("empty shape {rows}×{cols}")));
    }
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_FEATURE_VALUES)
        .ok_or_else(|| Error::format("feature file", format!("shape {rows}×{cols} too large")))?;
    let body = &bytes[8..];
    if body.len() != 4 * n {
        return Err(Error::format(
            "feature file",
            format!("expected {} value bytes, found {}", 4 * n, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("feature file", "non-finite value"));
    }
    Tensor::matrix(rows, cols, data)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn encode_labels(labels: &LabelSeq) -> String {
    let mut s = labels
        .symbols()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    s.push('\n');
    s
}

/// Parses a single line of space-separated non-blank symbol ids.
pub fn parse_labels(text: &str) -> Result<LabelSeq> {
    let line = text.strip_suffix('\n').unwrap_or(text);
    if line.contains('\n') {
        return Err(Error::format("label file", "more than one line"));
    }
    let symbols = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::format("label file", format!("bad symbol {tok:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelSeq::new(symbols).map_err(|e| Error::format("label file", e.to_string()))
}

pub fn write_labels(path: &Path, labels: &LabelSeq) -> Result<()> {
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelSeq> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One paired utterance. File paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub accent_id: String,
    pub label_file: String,
    pub source_feature_file: String,
    pub target_feature_file: String,
    pub split: Split,
    pub accent_score: f64,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        if self.utt_id.is_empty() || self.speaker_id.is_empty() {
            return Err(Error::format("manifest", "empty utt_id or speaker_id"));
        }
        if !(0.0..=1.0).contains(&self.accent_score) {
            return Err(Error::format(
                "manifest",
                format!("{}: accent_score {} outside [0, 1]", self.utt_id, self.accent_score),
            ));
        }
        Ok(())
    }
}

pub fn parse_manifest_line(line: &str) -> Result<ManifestEntry> {
    let entry: ManifestEntry =
        serde_json::from_str(line).map_err(|e| Error::format("manifest", e.to_string()))?;
    entry.validate()?;
    Ok(entry)
}

/// Parses a whole manifest; blank lines are skipped and rows must be sorted
/// by strictly increasing `utt_id`.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut rows: Vec<ManifestEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_manifest_line(line).map_err(|e| match e {
            Error::Format { kind, reason } => Error::Format {
                kind,
                reason: format!("line {}: {reason}", i + 1),
            },
            other => other,
        })?;
        if let Some(prev) = rows.last() {
            if prev.utt_id >= entry.utt_id {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: rows not sorted by utt_id", i + 1),
                ));
            }
        }
        rows.push(entry);
    }
    Ok(rows)
}

pub fn encode_manifest(rows: &[ManifestEntry]) -> String {
    let mut sorted: Vec<&ManifestEntry> = rows.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut out = String::new();
    for row in sorted {
        out.push_str(&serde_json::to_string(row).expect("manifest rows serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, rows: &[ManifestEntry]) -> Result<()> {
    fs::write(path, encode_manifest(rows)).map_err(|e| Error::io(path, e))
}

/// A parsed manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = parse_manifest(&text).map_err(|e| match e {
            Error::Format { kind, reason } => Error::Format {
                kind,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, rows })
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_header_layout() {
        let t = Tensor::matrix(2, 1, vec![0.5, -2.0]).unwrap();
        let bytes = encode_features(&t).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &0.5f32.to_le_bytes());
        assert_eq!(decode_features(&bytes).unwrap(), t);
    }

    #[test]
    fn malformed_features_are_rejected() {
        assert!(decode_features(&[]).is_err());
        assert!(decode_features(&[1, 0, 0, 0, 1, 0, 0, 0]).is_err());
        assert!(decode_features(&[0, 0, 0, 0, 1, 0, 0, 0]).is_err());
        let mut bytes = vec![1, 0, 0, 0, 1, 0, 0, 0];
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_features(&bytes).is_err());
        assert!(decode_features(&[255, 255, 255, 255, 255, 255, 255, 255]).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let l = LabelSeq::new(vec![3, 1, 4]).unwrap();
        assert_eq!(encode_labels(&l), "3 1 4\n");
        assert_eq!(parse_labels("3 1 4\n").unwrap(), l);
        assert!(parse_labels("3 0 4").is_err());
        assert!(parse_labels("3 x").is_err());
        assert!(parse_labels("1\n2\n").is_err());
        assert!(parse_labels("").unwrap().is_empty());
    }

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            utt_id: id.into(),
            speaker_id: "spk00".into(),
            accent_id: "accent0".into(),
            label_file: format!("labels/{id}.lab"),
            source_feature_file: format!("features/{id}.src.feat"),
            target_feature_file: format!("features/{id}.tgt.feat"),
            split: Split::Train,
            accent_score: 0.75,
        }
    }

    #[test]
    fn manifest_is_sorted_and_strict() {
        let text = encode_manifest(&[entry("b"), entry("a")]);
        let rows = parse_manifest(&text).unwrap();
        assert_eq!(rows[0].utt_id, "a");
        assert_eq!(rows, vec![entry("a"), entry("b")]);
        let unsorted = format!(
            "{}\n{}\n",
            serde_json::to_string(&entry("b")).unwrap(),
            serde_json::to_string(&entry("a")).unwrap()
        );
        assert!(parse_manifest(&unsorted).is_err());
        assert!(parse_manifest_line(r#"{"utt_id":"a"}"#).is_err());
        let mut extra: serde_json::Value = serde_json::to_value(entry("a")).unwrap();
        extra["bonus"] = 1.into();
        assert!(parse_manifest_line(&extra.to_string()).is_err());
        let mut bad = entry("a");
        bad.accent_score = 1.5;
        assert!(parse_manifest_line(&serde_json::to_string(&bad).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn features_round_trip_bytes(rows in 1usize..6, cols in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| rng.random_range(-1e3f32..1e3) as f64).collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let bytes = encode_features(&t).unwrap();
            prop_assert_eq!(encode_features(&decode_features(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
