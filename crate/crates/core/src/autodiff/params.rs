use super::{Scalar, Tensor};
use crate::error::{Result, TitError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
///
/// Gradients accumulate additively until [`ParamStore::zero_grad`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(TitError::InvalidTensor(format!(
                "duplicate parameter `{name}`"
            )));
        }
        if !value.is_finite() {
            return Err(TitError::InvalidTensor(format!(
                "parameter `{name}` is not finite"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .fold(T::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / (norm + T::from_f64_lossy(1e-6));
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
            }
        }
        norm
    }

    /// Bitwise snapshot of all values, for before/after comparisons.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect()
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TitError::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| TitError::Format(format!("missing parameter `{}`", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(TitError::Shape {
                    op: "load_from",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
