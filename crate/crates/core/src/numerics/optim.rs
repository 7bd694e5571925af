use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::SgdMomentum { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && eps.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First-order optimizer state aligned with a parameter store.
pub struct Optimizer {
    kind: OptimizerKind,
    m: GradBuffer,
    v: GradBuffer,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        Self {
            kind,
            m: GradBuffer::zeros_like(store),
            v: GradBuffer::zeros_like(store),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and re-applies the store's storage precision.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for id in ids {
                    let g = grads.get(id);
                    let m = self.m.get_mut(id);
                    let p = store.get_mut(id).data_mut();
                    for ((pi, mi), gi) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                        *mi = momentum * *mi + gi;
                        *pi -= lr * *mi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for id in ids {
                    let g = grads.get(id);
                    let m = self.m.get_mut(id);
                    let v = self.v.get_mut(id);
                    let p = store.get_mut(id).data_mut();
                    for (((pi, mi), vi), gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.enforce_precision();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Precision;
    use crate::numerics::tensor::Tensor;

    fn minimize(kind: OptimizerKind, lr: f64) -> f64 {
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("x", Tensor::row_vector(vec![3.0, -2.0])).unwrap();
        let mut opt = Optimizer::new(kind, &store);
        let mut grads = GradBuffer::zeros_like(&store);
        for _ in 0..500 {
            grads.clear();
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            grads.add_scaled(id, &g, 1.0);
            opt.step(&mut store, &grads, lr);
        }
        store.get(id).l2_norm()
    }

    #[test]
    fn both_optimizers_reach_the_minimum_of_a_bowl() {
        assert!(minimize(OptimizerKind::SgdMomentum { momentum: 0.9 }, 0.01) < 1e-3);
        assert!(minimize(OptimizerKind::default(), 0.05) < 1e-2);
    }
}
