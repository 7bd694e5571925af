//! Rotary positional encoding with real-valued positions.

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// Cosine and sine tables of shape `[positions.len(), head_dim / 2]`.
pub(crate) fn rope_tables(positions: &[f64], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for f in &freqs {
            let (s, c) = (p * f).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos, sin)
}

/// Rotates each vector pairwise, channel pair `(2i, 2i+1)` by
/// `position · base^(−2i/d)`.
pub fn apply_rope(x: &[Vec<f64>], positions: &[f64], base: f64) -> Result<Vec<Vec<f64>>> {
    if x.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} vectors but {} positions",
            x.len(),
            positions.len()
        )));
    }
    if base <= 1.0 {
        return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
    }
    let Some(dim) = x.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if dim % 2 != 0 {
        return Err(Error::Config(format!("rope head dimension {dim} is odd")));
    }
    if x.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("vectors of differing length".into()));
    }
    let half = dim / 2;
    let (cos, sin) = rope_tables(positions, dim, base);
    Ok(x.iter()
        .enumerate()
        .map(|(r, v)| {
            let mut out = v.clone();
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
                out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let x = vec![vec![0.3, -1.2, 2.0, 0.5]];
        assert_eq!(apply_rope(&x, &[0.0], ROPE_BASE).unwrap(), x);
    }

    #[test]
    fn odd_dimension_is_rejected() {
        let err = apply_rope(&[vec![1.0, 2.0, 3.0]], &[1.0], ROPE_BASE).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn relative_position_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [2, 4, 8, 16] {
            for _ in 0..100 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let k: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let p1 = rng.random_range(-50.0..50.0);
                let p2 = rng.random_range(-50.0..50.0);
                let d = rng.random_range(-50.0..50.0);
                let lhs = dot(
                    &apply_rope(&[q.clone()], &[p1], ROPE_BASE).unwrap()[0],
                    &apply_rope(&[k.clone()], &[p2], ROPE_BASE).unwrap()[0],
                );
                let rhs = dot(
                    &apply_rope(&[q], &[p1 + d], ROPE_BASE).unwrap()[0],
                    &apply_rope(&[k], &[p2 + d], ROPE_BASE).unwrap()[0],
                );
                assert!((lhs - rhs).abs() < 1e-6, "dim {dim}: {lhs} vs {rhs}");
            }
        }
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(
            x in proptest::collection::vec(-10.0f64..10.0, 8),
            p in -1000.0f64..1000.0,
        ) {
            let y = apply_rope(&[x.clone()], &[p], ROPE_BASE).unwrap();
            let nx = dot(&x, &x).sqrt();
            let ny = dot(&y[0], &y[0]).sqrt();
            prop_assert!((nx - ny).abs() < 1e-6);
        }
    }
}
