//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
}

/// Insertion-ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
        });
        Ok(id)
    }

    /// Weight matrix drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// where `fan_in` is the leading dimension.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        let fan_in = shape[0] as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalars across all parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Sets every gradient to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.tensor.shape()));
        }
    }

    /// Adds `scale * dL/dp` from a backward pass into each parameter's grad.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        let mut found: Vec<_> = grads.params().filter_map(|(id, g)| g.map(|g| (id, g))).collect();
        found.sort_by_key(|(id, _)| *id);
        for (id, g) in found {
            let p = &mut self.params[id.0];
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn accumulate_from(&mut self, other: &[Option<Tensor>], scale: f64) {
        for (p, g) in self.params.iter_mut().zip(other) {
            if let Some(g) = g {
                let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
                for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert_zeros("w", &[2, 3]).unwrap();
        assert!(s.insert_zeros("w", &[1]).is_err());
    }

    #[test]
    fn count_matrix_and_bias() {
        let mut s = ParamStore::new();
        assert_eq!(s.count(), 0);
        s.insert_zeros("w", &[2, 3]).unwrap();
        s.insert_zeros("b", &[3]).unwrap();
        assert_eq!(s.count(), 9);
    }

    #[test]
    fn seeded_init_is_reproducible_and_bounded() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut s = ParamStore::new();
            s.insert_uniform("w", &[16, 4], &mut rng).unwrap();
            s
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        let w = a.tensor(a.id("w").unwrap());
        assert!(w.data().iter().all(|v| v.abs() < 0.25));
    }
}
