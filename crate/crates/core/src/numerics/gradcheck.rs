//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences with step `eps`. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (value, analytic) = f(params);
    if !value.is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let (plus, _) = f(&x);
        x[i] = orig - eps;
        let (minus, _) = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Runs [`finite_diff_check`] over every parameter in `store`, with the
/// scalar output produced by `build` on a fresh graph.
pub fn graph_grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Var,
{
    let flat: Vec<f64> = store.iter().flat_map(|(_, p)| p.tensor.data().to_vec()).collect();
    let ids: Vec<_> = store.ids().collect();
    let mut eval = |values: &[f64]| -> (f64, Vec<f64>) {
        let mut offset = 0;
        for &id in &ids {
            let t = store.get_mut(id);
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        let mut g = Graph::new(store);
        let out = build(&mut g);
        let value = g.scalar(out);
        let grads = match g.backward(out) {
            Ok(grads) => grads,
            Err(_) => return (f64::NAN, vec![0.0; values.len()]),
        };
        let mut flat_grad = Vec::with_capacity(values.len());
        for &id in &ids {
            match grads.param(id) {
                Some(gr) => flat_grad.extend_from_slice(gr),
                None => flat_grad.extend(std::iter::repeat_n(0.0, store.get(id).len())),
            }
        }
        (value, flat_grad)
    };
    let result = finite_diff_check(&mut eval, &flat, eps);
    eval(&flat);
    result
}

/// Overwrites every parameter with `N(0, std²)` draws so that zero-initialized
/// projections do not hide gradient paths.
pub fn randomize<R: Rng>(store: &mut ParamStore, std: f64, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Init::Normal(std).build(&shape, rng);
    }
    store.enforce_precision();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::Linear;
    use crate::numerics::params::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[3.0], 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let w = [0.5, -2.0, 3.25];
        let err = finite_diff_check(
            |x| (x.iter().zip(&w).map(|(a, b)| a * b).sum(), w.to_vec()),
            &[1.0, 2.0, -1.0],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        assert!(finite_diff_check(|_| (f64::NAN, vec![0.0]), &[1.0], 1e-4).is_err());
        assert!(finite_diff_check(|x| (x[0], vec![1.0]), &[1.0], 0.0).is_err());
    }

    #[test]
    fn two_layer_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(Precision::F64);
        let l1 = Linear::new(&mut store, "l1", 5, 8, Init::Normal(0.5), true, &mut rng).unwrap();
        let l2 = Linear::new(&mut store, "l2", 8, 3, Init::Normal(0.5), true, &mut rng).unwrap();
        randomize(&mut store, 0.5, &mut rng);
        let x = Init::Normal(1.0).build(&[4, 5], &mut rng);
        let err = graph_grad_check(&mut store, 1e-4, |g| {
            let xv = g.input(x.clone());
            let h = l1.forward(g, xv);
            let h = g.silu(h);
            let y = l2.forward(g, h);
            let sq = g.square(y);
            g.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
