//! Named parameters and the per-model parameter registry.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A learnable (or tracked) tensor with its gradient accumulator.
///
/// Non-trainable parameters (batch-norm running statistics) live in the same
/// registry so model state serialises as one unit, but they receive no
/// gradients and are skipped by optimizers and parameter counts.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

/// Registry owning every parameter of one model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let gradient = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            gradient,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn gradient(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].gradient
    }

    /// Accumulate `delta` into the gradient of `id`.
    pub fn accumulate_gradient(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.gradient.shape() != delta.shape() {
            return Err(Error::shape(
                format!("gradient of '{}'", p.name),
                p.gradient.shape(),
                delta.shape(),
            ));
        }
        for (g, d) in p.gradient.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Reset every gradient to exactly zero.
    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of trainable parameters, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total number of scalar values across trainable parameters.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Snapshot of every parameter value, for best-epoch restore.
    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Restore values from a snapshot taken on the same store.
    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        debug_assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value = s.clone();
        }
    }
}
