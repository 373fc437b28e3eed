use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    /// Frozen parameters (e.g. momentum targets) never receive gradients.
    pub requires_grad: bool,
}

/// Named learnable tensors shared by every graph built for a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad,
        });
        id
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

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds backward results into the stored gradients. Every trainable parameter ends
    /// up with a gradient, zero if the loss did not reach it.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(Some(contrib)) = grads.per_param.get(i) {
                g.add_assign(contrib);
            }
        }
    }

    /// Global L2 norm of the gradients of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.grad(id))
            .map(|g| g.sum_of_squares().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales the gradients of `ids` so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.grad_norm(ids);
        if norm > max_norm && norm > 0.0 {
            let s = F::from_f64(max_norm / norm);
            for &id in ids {
                if let Some(g) = self.params[id.0].grad.as_mut() {
                    for x in g.data_mut() {
                        *x *= s;
                    }
                }
            }
        }
        norm
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub(crate) per_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.per_param.get(id.0).and_then(|g| g.as_ref())
    }
}
