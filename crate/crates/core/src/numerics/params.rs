use rand::Rng;

use super::{NumericsError, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// He-uniform weight: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn he_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), NumericsError> {
        let mut problems = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            match other.find(name) {
                Some(j) if other.tensors[j.0].shape() == self.tensors[i].shape() => {}
                Some(j) => problems.push(format!(
                    "{name}: expected {:?}, found {:?}",
                    self.tensors[i].shape(),
                    other.tensors[j.0].shape()
                )),
                None => problems.push(format!("{name}: missing")),
            }
        }
        for name in &other.names {
            if self.find(name).is_none() {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(NumericsError::ParamMismatch(problems));
        }
        for i in 0..self.tensors.len() {
            let j = other.find(&self.names[i]).expect("checked above");
            self.tensors[i] = other.tensors[j.0].clone();
        }
        Ok(())
    }
}
