use std::collections::BTreeMap;
use std::sync::Arc;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named trainable (or frozen) tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    trainable: bool,
    /// Whether decoupled weight decay applies (matrix weights only).
    decay: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn decay(&self) -> bool {
        self.decay
    }
}

/// Ordered collection of parameters. Order is registration order and is the
/// order used by checkpoints and optimisers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name, value: Arc::new(value), grad, trainable: true, decay });
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds gradients into the accumulators of trainable parameters.
    /// Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.0 {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// Global L2 norm of trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.squared_norm())
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients with respect to parameters produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub BTreeMap<ParamId, Tensor>);

impl ParamGrads {
    pub fn add(&mut self, id: ParamId, g: Tensor) {
        match self.0.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.0.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: ParamGrads) {
        for (id, g) in other.0 {
            self.add(id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }
}
