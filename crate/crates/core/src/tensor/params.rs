use std::collections::HashMap;

use rand::Rng;

use super::tape::Gradients;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether the optimizer applies weight decay to this parameter.
    pub decay: bool,
}

/// A non-trainable tensor carried with the model (BatchNorm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owner of every named parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim_name(&mut self, name: &str, slot: usize) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Contract(format!("duplicate tensor name {name:?}")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let id = self.params.len();
        self.claim_name(name, id)?;
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let id = self.buffers.len();
        // Buffers share the namespace but live in their own index space.
        self.claim_name(name, usize::MAX - id)?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(BufferId(id))
    }

    /// Parameter with `uniform(-bound, bound)` entries.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let value = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)));
        self.add_param(name, value, true)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(&i) if i < self.params.len() && self.params[i].name == name => Some(ParamId(i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers
            .iter()
            .position(|b| b.name == name)
            .map(BufferId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Accumulate gradients from a finished backward pass and commit the
    /// BatchNorm running statistics it collected.
    pub fn absorb(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += *v;
            }
        }
        for (id, value) in grads.stat_updates() {
            self.buffers[id.0].value = value.clone();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    decay: p.decay,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_across_params_and_buffers() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a.weight", Tensor::zeros(&[2]), true).unwrap();
        s.add_buffer("a.running_mean", Tensor::zeros(&[2])).unwrap();
        assert!(s.add_param("a.weight", Tensor::zeros(&[2]), true).is_err());
        assert!(s.add_buffer("a.weight", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.find_param("a.weight"), Some(ParamId(0)));
        assert_eq!(s.find_param("a.running_mean"), None);
        assert_eq!(s.find_buffer("a.running_mean"), Some(BufferId(0)));
    }

    #[test]
    fn zero_grad_clears_everything() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("p", Tensor::zeros(&[3]), true).unwrap();
        s.param_mut(id).grad = Tensor::full(&[3], 2.5);
        s.zero_grad();
        assert!(s.param(id).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(s.param(id).grad.shape(), s.param(id).value.shape());
    }
}
