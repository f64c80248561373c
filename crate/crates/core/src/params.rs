use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order for checkpoints, optimizers, and gradient checks.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param { name, value, grad });
        Ok(id)
    }

    /// Insert a parameter drawn uniformly from `[-range, range]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        range: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-range..=range)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape.to_vec(), T::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.id(name).map(|id| &mut self.entries[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .iter()
            .map(|p| p.grad.norm_sq())
            .sum::<T>()
            .sqrt()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        for (g, &d) in self.entries[id.0].grad.data_mut().iter_mut().zip(grad) {
            *g = *g + d;
        }
    }

    /// Replace every value with the matching entry of `other`, which must
    /// hold the same names and shapes in the same order.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}
