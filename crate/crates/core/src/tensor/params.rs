use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable matrix with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: String,
    value: Matrix,
    grad: Matrix,
}

impl Parameter {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }
}

/// Owns every parameter of a model, addressable by dense [`ParamId`] or by
/// stable string id. Registration order is preserved and defines iteration
/// order everywhere (optimizer, checkpoints).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let id = id.into();
        if self.by_name.contains_key(&id) {
            return Err(Error::Invalid(format!("duplicate parameter id `{id}`")));
        }
        let pid = ParamId(self.params.len());
        let (rows, cols) = value.shape();
        self.params.push(Parameter {
            id: id.clone(),
            value,
            grad: Matrix::zeros(rows, cols),
        });
        self.by_name.insert(id, pid);
        Ok(pid)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, pid: ParamId) -> &Parameter {
        &self.params[pid.0]
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.params[pid.0].id
    }

    pub fn value(&self, pid: ParamId) -> &Matrix {
        &self.params[pid.0].value
    }

    pub fn value_mut(&mut self, pid: ParamId) -> &mut Matrix {
        &mut self.params[pid.0].value
    }

    pub fn grad(&self, pid: ParamId) -> &Matrix {
        &self.params[pid.0].grad
    }

    pub fn grad_mut(&mut self, pid: ParamId) -> &mut Matrix {
        &mut self.params[pid.0].grad
    }

    /// Split borrow used by the optimizer.
    pub fn value_and_grad_mut(&mut self, pid: ParamId) -> (&mut Matrix, &Matrix) {
        let p = &mut self.params[pid.0];
        (&mut p.value, &p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces the value of `name`, keeping the registered shape.
    pub fn set_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let pid = self
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        self.value(pid).check_same_shape("set_value", &value)?;
        *self.value_mut(pid) = value;
        Ok(())
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_clears_accumulators() {
        let mut store = ParamStore::new();
        let a = store.register("a", Matrix::filled(2, 3, 1.0)).unwrap();
        store.grad_mut(a).fill(4.0);
        assert_eq!(store.grad(a).shape(), store.value(a).shape());
        store.zero_grad();
        assert!(store.grad(a).as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Matrix::zeros(1, 1)).unwrap();
        assert!(store.register("w", Matrix::zeros(1, 1)).is_err());
    }
}
