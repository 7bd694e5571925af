use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Storage precision for parameter values.
///
/// `F32` keeps every value representable as an `f32` (the checkpoint format)
/// by rounding after initialization and after every optimizer step; `F64` is
/// used by gradient checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Named parameters of one model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if self.precision == Precision::F32 {
            tensor.round_to_f32();
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Re-applies the storage precision to every value.
    pub fn enforce_precision(&mut self) {
        if self.precision == Precision::F32 {
            for p in &mut self.params {
                p.tensor.round_to_f32();
            }
        }
    }

    /// Copies values from `(name, tensor)` records. Every parameter must be
    /// present with a matching shape; extra records are rejected.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in records {
            let id = self
                .lookup(&name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            let slot = &mut self.params[id.0].tensor;
            if slot.shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        self.enforce_precision();
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.tensor))
    }
}

/// Weight initializers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Xavier/Glorot uniform for a `[fan_in, fan_out]` matrix.
    XavierUniform,
}

impl Init {
    pub fn build<R: Rng>(self, shape: &[usize], rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::XavierUniform => {
                let fan_in = shape.first().copied().unwrap_or(1) as f64;
                let fan_out = shape.get(1).copied().unwrap_or(1) as f64;
                let a = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add_scaled(&mut self, id: ParamId, grad: &[f64], scale: f64) {
        for (g, x) in self.grads[id.0].iter_mut().zip(grad) {
            *g += scale * x;
        }
    }

    pub fn merge(&mut self, other: &GradBuffer, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|x| x.is_finite())
    }
}
