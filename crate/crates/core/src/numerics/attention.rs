use super::graph::Graph;
use super::params::ParamStore;
use super::rope::ROPE_BASE;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter-free multi-head attention: queries and keys are rotated at
/// their positions per head, then `softmax(QKᵀ/√d_head)·V`.
pub fn attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    q_positions: &[f64],
    k_positions: &[f64],
    n_heads: usize,
) -> Result<Tensor> {
    if keys.rows() == 0 || keys.is_empty() {
        return Err(Error::InvalidArgument("attention over an empty key sequence".into()));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let d = queries.cols();
    if keys.cols() != d {
        return Err(Error::Shape("query and key widths differ".into()));
    }
    if n_heads == 0 || d % n_heads != 0 || values.cols() % n_heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {n_heads} heads")));
    }
    if (d / n_heads) % 2 != 0 {
        return Err(Error::Config("head dimension must be even".into()));
    }
    if q_positions.len() != queries.rows() || k_positions.len() != keys.rows() {
        return Err(Error::Shape("one position per row required".into()));
    }
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let q = g.input(queries.clone());
    let k = g.input(keys.clone());
    let v = g.input(values.clone());
    let q = g.rope(q, q_positions, n_heads, ROPE_BASE);
    let k = g.rope(k, k_positions, n_heads, ROPE_BASE);
    let o = g.attention(q, k, v, n_heads);
    Ok(g.value(o).clone())
}
