//! Connectionist Temporal Classification: loss with forward–backward
//! gradients, a brute-force reference, and greedy decoding.
//!
//! Symbol 0 is the blank.

use crate::error::{Error, Result};
use crate::numerics::linalg::log_sum_exp;
use crate::numerics::Tensor;

pub const BLANK: usize = 0;

/// Content symbols in `[1, V)`; may be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(symbols: Vec<usize>) -> Result<Self> {
        if symbols.contains(&BLANK) {
            return Err(Error::InvalidArgument("label sequence contains the blank symbol".into()));
        }
        Ok(Self(symbols))
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_symbol(&self) -> Option<usize> {
        self.0.iter().copied().max()
    }

    /// Frames needed to emit this sequence: one per symbol plus a separating
    /// blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Per-frame log-probabilities `[T, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    values: Tensor,
}

impl LogProbLattice {
    /// Validates that every row log-sum-exps to zero within `1e-5`.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape("lattice must be a [T, V] matrix".into()));
        }
        for (t, row) in values.iter_rows().enumerate() {
            let lse = log_sum_exp(row);
            if !(lse.abs() <= 1e-5) {
                return Err(Error::InvalidArgument(format!(
                    "lattice row {t} is not log-normalized (logsumexp {lse})"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Builds a lattice from arbitrary logits by row-wise log-softmax.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let mut values = logits.clone();
        for r in 0..values.rows() {
            let row = values.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Self::new(values)
    }

    pub(crate) fn from_tensor_unchecked(values: Tensor) -> Self {
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn vocab(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn at(&self, t: usize, k: usize) -> f64 {
        self.values.row(t)[k]
    }
}

#[derive(Clone, Debug)]
pub struct CtcResult {
    /// `−log p(labels | lattice)`; `+inf` when infeasible.
    pub loss: f64,
    /// Derivative of `loss` with respect to every lattice value, `[T, V]`.
    pub gradient: Tensor,
    pub feasible: bool,
}

/// CTC loss and gradient by log-space forward–backward.
///
/// Symbols outside `[1, V)` make the target unreachable and are reported as
/// infeasible.
pub fn ctc_loss(lattice: &LogProbLattice, labels: &[usize]) -> CtcResult {
    let t_len = lattice.frames();
    let v = lattice.vocab();
    let infeasible = || CtcResult {
        loss: f64::INFINITY,
        gradient: Tensor::zeros(&[t_len, v]),
        feasible: false,
    };
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len == 0 || t_len < labels.len() + repeats || labels.iter().any(|&l| l == BLANK || l >= v) {
        return infeasible();
    }

    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lattice.at(0, BLANK);
    if s_len > 1 {
        alpha[1] = lattice.at(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut terms = [prev[s], neg, neg];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip(s) {
                terms[2] = prev[s - 2];
            }
            cur[s] = lattice.at(t, ext[s]) + log_sum_exp(&terms);
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lattice.at(t_len - 1, BLANK);
    if s_len > 1 {
        beta[last + s_len - 2] = lattice.at(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut terms = [next[s], neg, neg];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && skip(s + 2) {
                terms[2] = next[s + 2];
            }
            cur[s] = lattice.at(t, ext[s]) + log_sum_exp(&terms);
        }
    }

    let tail = &alpha[last..];
    let log_p = if s_len > 1 {
        log_sum_exp(&[tail[s_len - 1], tail[s_len - 2]])
    } else {
        tail[0]
    };
    if !log_p.is_finite() {
        return infeasible();
    }

    let mut grad = Tensor::zeros(&[t_len, v]);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            let occupancy = (a + b - lattice.at(t, ext[s]) - log_p).exp();
            row[ext[s]] -= occupancy;
        }
    }
    CtcResult {
        loss: -log_p,
        gradient: grad,
        feasible: true,
    }
}

/// Largest number of frame paths [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Reference loss by enumerating all `V^T` frame paths.
pub fn ctc_brute_force(lattice: &LogProbLattice, labels: &[usize]) -> Result<f64> {
    let t_len = lattice.frames();
    let v = lattice.vocab();
    let paths = (v as u64)
        .checked_pow(t_len as u32)
        .filter(|&n| n <= BRUTE_FORCE_LIMIT)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("{v}^{t_len} paths exceed the enumeration limit"))
        })?;
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for mut code in 0..paths {
        for slot in path.iter_mut() {
            *slot = (code % v as u64) as usize;
            code /= v as u64;
        }
        if collapse(&path) == labels {
            let logp: f64 = path.iter().enumerate().map(|(t, &k)| lattice.at(t, k)).sum();
            total += logp.exp();
        }
    }
    Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY })
}

/// Removes consecutive repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (lowest index wins ties), collapsed.
pub fn ctc_greedy_decode(lattice: &LogProbLattice) -> LabelSeq {
    let best: Vec<usize> = lattice
        .values
        .iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &x)| if x > acc.1 { (k, x) } else { acc })
                .0
        })
        .collect();
    LabelSeq(collapse(&best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(t: usize, v: usize) -> LogProbLattice {
        LogProbLattice::new(Tensor::full(&[t, v], -(v as f64).ln())).unwrap()
    }

    fn random_lattice(rng: &mut ChaCha8Rng, t: usize, v: usize) -> LogProbLattice {
        let logits = Tensor::matrix(t, v, (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        LogProbLattice::from_logits(&logits).unwrap()
    }

    fn one_hot_path(path: &[usize], v: usize) -> LogProbLattice {
        let mut rows = Vec::new();
        for &k in path {
            let mut r = vec![-1e4; v];
            r[k] = 0.0;
            rows.push(r);
        }
        LogProbLattice::from_tensor_unchecked(Tensor::from_rows(&rows).unwrap())
    }

    #[test]
    fn single_frame_single_label() {
        let r = ctc_loss(&uniform(1, 2), &[1]);
        assert!((r.loss - (-(0.5f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label() {
        let lat = uniform(2, 2);
        let r = ctc_loss(&lat, &[1]);
        assert!((r.loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((ctc_brute_force(&lat, &[1]).unwrap() - r.loss).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separator() {
        let r = ctc_loss(&uniform(1, 2), &[1, 1]);
        assert!(!r.feasible);
        assert_eq!(r.loss, f64::INFINITY);
        assert!(r.gradient.data().iter().all(|&g| g == 0.0));
        assert!(ctc_loss(&uniform(3, 2), &[1, 1]).feasible);
    }

    #[test]
    fn empty_labels_take_the_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(&mut rng, 2, 3);
        let want = -(lat.at(0, 0) + lat.at(1, 0));
        assert!((ctc_loss(&lat, &[]).loss - want).abs() < 1e-12);
        assert!((ctc_brute_force(&lat, &[]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn deterministic_valid_path_has_zero_loss() {
        let lat = one_hot_path(&[0, 2, 2, 0, 1], 3);
        assert!(ctc_loss(&lat, &[2, 1]).loss.abs() < 1e-9);
        assert!(ctc_brute_force(&lat, &[2, 1]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = rng.random_range(1..=6);
            let v = rng.random_range(2..=4);
            let n = rng.random_range(0..=3);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..v)).collect();
            let lat = random_lattice(&mut rng, t, v);
            let fast = ctc_loss(&lat, &labels).loss;
            let slow = ctc_brute_force(&lat, &labels).unwrap();
            if slow.is_infinite() {
                assert!(fast.is_infinite());
            } else {
                assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
                assert!(fast >= -1e-12);
            }
        }
    }

    #[test]
    fn brute_force_guard() {
        assert!(ctc_brute_force(&uniform(21, 2), &[1]).is_err());
    }

    #[test]
    fn greedy_decoding_collapses() {
        assert!(ctc_greedy_decode(&one_hot_path(&[0, 0, 0], 3)).is_empty());
        assert_eq!(ctc_greedy_decode(&one_hot_path(&[1, 1, 0, 1], 3)).symbols(), &[1, 1]);
        assert_eq!(ctc_greedy_decode(&one_hot_path(&[0, 2, 2, 0, 2], 3)).symbols(), &[2, 2]);
    }

    #[test]
    fn lattice_validation() {
        assert!(LogProbLattice::new(Tensor::zeros(&[2, 3])).is_err());
        assert!(LabelSeq::new(vec![1, 0]).is_err());
        assert_eq!(LabelSeq::new(vec![1, 1, 2, 2, 2]).unwrap().min_frames(), 8);
    }
}
