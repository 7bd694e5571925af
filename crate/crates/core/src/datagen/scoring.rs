//! Accentedness scoring and speaker signature extraction for synthetic
//! features.

use nalgebra::{DMatrix, DVector};

use super::{AccentRule, SymbolBank};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const OFFSET_ITERATIONS: usize = 3;
const ENERGY_SCALE: f64 = 0.05;
const RESIDUAL_FRACTION: f64 = 0.15;
const STRETCH_TOLERANCE: f64 = 0.25;
const STRETCH_SCALE: f64 = 0.2;

struct Prototype {
    symbol: usize,
    vector: Vec<f64>,
}

fn prototypes(bank: &SymbolBank, rules: &[AccentRule]) -> Vec<Prototype> {
    let mut out: Vec<Prototype> = (1..bank.vocab_size())
        .map(|s| Prototype {
            symbol: s,
            vector: bank.base(s).to_vec(),
        })
        .collect();
    for rule in rules {
        for (&s, delta) in &rule.substitutions {
            out.push(Prototype {
                symbol: s,
                vector: bank.base(s).iter().zip(delta).map(|(b, d)| b + d).collect(),
            });
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64], offset: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(offset)
        .map(|((x, p), o)| (x - o - p) * (x - o - p))
        .sum()
}

/// Nearest-prototype labelling with an iteratively estimated constant
/// per-utterance offset. Returns the prototype index of every frame and the
/// offset.
fn label_frames(features: &Tensor, protos: &[Prototype]) -> (Vec<usize>, Vec<f64>) {
    let dim = features.cols();
    let mut offset = vec![0.0; dim];
    let mut labels = vec![0; features.rows()];
    for _ in 0..OFFSET_ITERATIONS {
        for (r, row) in features.iter_rows().enumerate() {
            labels[r] = (0..protos.len())
                .min_by(|&a, &b| {
                    sq_dist(row, &protos[a].vector, &offset).total_cmp(&sq_dist(row, &protos[b].vector, &offset))
                })
                .expect("at least one prototype");
        }
        offset.iter_mut().for_each(|o| *o = 0.0);
        for (row, &l) in features.iter_rows().zip(&labels) {
            for c in 0..dim {
                offset[c] += (row[c] - protos[l].vector[c]) / features.rows() as f64;
            }
        }
    }
    (labels, offset)
}

/// Degree in `[0, 1]` to which a frame, relative to `base`, has moved along
/// `delta`; zero unless the move explains the frame up to a small residual.
fn substitution_degree(frame: &[f64], offset: &[f64], base: &[f64], delta: &[f64]) -> f64 {
    let norm2: f64 = delta.iter().map(|d| d * d).sum();
    if norm2 == 0.0 {
        return 0.0;
    }
    let diff: Vec<f64> = frame.iter().zip(offset).zip(base).map(|((f, o), b)| f - o - b).collect();
    let alpha = (diff.iter().zip(delta).map(|(x, d)| x * d).sum::<f64>() / norm2).clamp(0.0, 1.0);
    let residual: f64 = diff.iter().zip(delta).map(|(x, d)| (x - alpha * d).powi(2)).sum();
    if residual > RESIDUAL_FRACTION * norm2 {
        return 0.0;
    }
    alpha
}

/// Accentedness in `[0, 1]`.
///
/// Each frame is matched to its nearest symbol prototype after removing an
/// estimated per-utterance offset. The substitution energy is the mean degree
/// to which frames have moved along a rule's perturbation for their symbol;
/// the stretch term is how far the apparent frames-per-symbol rate exceeds
/// the native rate. Their scaled sum `x` is squashed by `x / (1 + x)`.
pub fn accent_score(features: &Tensor, bank: &SymbolBank, rules: &[AccentRule]) -> Result<f64> {
    if rules.is_empty() {
        return Err(Error::InvalidArgument("accent scoring needs at least one rule".into()));
    }
    if features.rank() != 2 || features.rows() == 0 || features.cols() != bank.feature_dim {
        return Err(Error::Shape(format!(
            "features must be [T>0, {}], got {:?}",
            bank.feature_dim,
            features.shape()
        )));
    }
    let protos = prototypes(bank, rules);
    let (labels, offset) = label_frames(features, &protos);

    let mut energy = 0.0;
    for row in features.iter_rows() {
        let mut best = 0.0f64;
        for rule in rules {
            for (&s, delta) in &rule.substitutions {
                best = best.max(substitution_degree(row, &offset, bank.base(s), delta));
            }
        }
        energy += best;
    }
    energy /= features.rows() as f64;

    let mut segments = 1;
    for w in labels.windows(2) {
        if protos[w[0]].symbol != protos[w[1]].symbol {
            segments += 1;
        }
    }
    let stretch = labels.len() as f64 / (segments as f64 * bank.mean_frames_per_symbol);
    let stretch_excess = (stretch - 1.0 - STRETCH_TOLERANCE).max(0.0);

    let raw = energy / ENERGY_SCALE + stretch_excess / STRETCH_SCALE;
    Ok(raw / (1.0 + raw))
}

/// Estimates the speaker component of an utterance.
///
/// The mean frame is regressed jointly on the symbol bases and the known
/// signatures; the fitted signature part is returned with unit norm (or all
/// zeros when it vanishes).
pub fn extract_signature(features: &Tensor, bank: &SymbolBank, signatures: &[&[f64]]) -> Result<Vec<f64>> {
    let dim = bank.feature_dim;
    if features.rank() != 2 || features.rows() == 0 || features.cols() != dim {
        return Err(Error::Shape(format!(
            "features must be [T>0, {dim}], got {:?}",
            features.shape()
        )));
    }
    if signatures.is_empty() || signatures.iter().any(|s| s.len() != dim) {
        return Err(Error::Shape("signatures must be non-empty and match the feature width".into()));
    }
    let n_sym = bank.vocab_size() - 1;
    let cols = n_sym + signatures.len();
    let a = DMatrix::from_fn(dim, cols, |r, c| {
        if c < n_sym {
            bank.base(c + 1)[r]
        } else {
            signatures[c - n_sym][r]
        }
    });
    let mean = DVector::from_vec(features.mean_rows());
    let coef = a
        .svd(true, true)
        .solve(&mean, 1e-10)
        .map_err(|e| Error::InvalidArgument(format!("signature regression failed: {e}")))?;
    let mut sig = vec![0.0; dim];
    for (k, s) in signatures.iter().enumerate() {
        let w = coef[n_sym + k];
        for (o, v) in sig.iter_mut().zip(*s) {
            *o += w * v;
        }
    }
    let norm = sig.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-9 {
        sig.iter_mut().for_each(|x| *x /= norm);
    } else {
        sig.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(sig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::LabelSeq;
    use crate::datagen::{accentify, generate_sentences, synth_native, DatagenConfig, DatasetBank};
    use crate::numerics::cosine;
    use crate::seed::derived_rng;

    fn setup() -> (DatagenConfig, DatasetBank, Vec<LabelSeq>) {
        let config = DatagenConfig::default();
        let bank = DatasetBank::generate(&config, 17).unwrap();
        let sentences = generate_sentences(&config, 17);
        (config, bank, sentences)
    }

    #[test]
    fn natives_score_low_and_accented_high() {
        let (config, bank, sentences) = setup();
        let params = config.synth_params();
        let mut checked = 0;
        for (j, labels) in sentences.iter().enumerate() {
            for speaker in bank.speakers.iter().take(3) {
                let mut rng = derived_rng(1, "score-test", &format!("{j}-{}", speaker.speaker_id));
                let native = synth_native(&bank.symbols, speaker, labels, params, &mut rng).unwrap();
                let s = accent_score(&native.features, &bank.symbols, &bank.rules).unwrap();
                assert!(s < 0.5, "native scored {s}");
                for rule in &bank.rules {
                    if labels.symbols().iter().any(|x| rule.substitutions.contains_key(x)) {
                        let acc = accentify(&native, rule, &mut rng).unwrap();
                        let s = accent_score(&acc, &bank.symbols, &bank.rules).unwrap();
                        assert!(s > 0.5, "accented scored {s}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn score_grows_with_accent_strength() {
        let (config, bank, sentences) = setup();
        let rule = &bank.rules[0];
        let labels = sentences
            .iter()
            .find(|l| l.symbols().iter().any(|x| rule.substitutions.contains_key(x)))
            .unwrap();
        let mut rng = derived_rng(2, "mono", "");
        let native = synth_native(&bank.symbols, &bank.speakers[0], labels, config.synth_params(), &mut rng).unwrap();
        let mut last = -1.0;
        for k in 0..=10 {
            let scaled = AccentRule {
                jitter: 0.0,
                ..rule.scaled(k as f64 / 10.0)
            };
            let acc = accentify(&native, &scaled, &mut derived_rng(3, "mono", "")).unwrap();
            let s = accent_score(&acc, &bank.symbols, &bank.rules).unwrap();
            assert!((0.0..=1.0).contains(&s));
            assert!(s >= last - 1e-12, "score dropped from {last} to {s} at strength {k}");
            last = s;
        }
        assert!(last > 0.5);
    }

    #[test]
    fn scoring_rejects_bad_input() {
        let (_, bank, _) = setup();
        assert!(accent_score(&Tensor::zeros(&[3, 24]), &bank.symbols, &[]).is_err());
        assert!(accent_score(&Tensor::zeros(&[3, 5]), &bank.symbols, &bank.rules).is_err());
    }

    #[test]
    fn signatures_of_natives_are_recovered() {
        let (config, bank, sentences) = setup();
        let sigs = bank.signatures();
        for (j, labels) in sentences.iter().take(20).enumerate() {
            for speaker in &bank.speakers {
                let mut rng = derived_rng(4, "sig", &format!("{j}"));
                let native = synth_native(&bank.symbols, speaker, labels, config.synth_params(), &mut rng).unwrap();
                let est = extract_signature(&native.features, &bank.symbols, &sigs).unwrap();
                let c = cosine(&est, &speaker.signature);
                assert!(c > 0.9, "cosine {c}");
            }
        }
    }

    #[test]
    fn signature_of_pure_content_vanishes() {
        let (_, bank, _) = setup();
        let rows: Vec<Vec<f64>> = (1..4).map(|s| bank.symbols.base(s).to_vec()).collect();
        let est = extract_signature(&Tensor::from_rows(&rows).unwrap(), &bank.symbols, &bank.signatures()).unwrap();
        assert!(est.iter().all(|&x| x == 0.0), "{est:?}");
    }
}
