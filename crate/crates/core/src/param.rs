//! Named trainable parameters, stored flat so optimizers, the gradient
//! checker, and the checkpoint writer can walk them uniformly.

use crate::error::{Result, SpemError};

/// Which side of the parameter audit a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Accumulated gradient; `None` until a backward pass has reached it.
    pub grad: Option<Vec<f64>>,
    /// Whether generic weight decay applies to this parameter.
    pub decay: bool,
    pub group: ParamGroup,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: Vec<usize>,
        decay: bool,
        group: ParamGroup,
    ) -> ParamId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter buffer does not fill its shape"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
            grad: None,
            decay,
            group,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub(crate) fn accumulate(&mut self, index: usize, grad: &[f64]) {
        let p = &mut self.params[index];
        match p.grad {
            Some(ref mut acc) => {
                for (a, g) in acc.iter_mut().zip(grad.iter()) {
                    *a += g;
                }
            }
            None => p.grad = Some(grad.to_vec()),
        }
    }

    /// Reset all gradients to "not yet computed".
    pub fn zero_grad(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = None;
        }
    }

    /// Give parameters the loss never reached an explicit zero gradient,
    /// so an optimizer step can run over the whole store.
    pub fn fill_missing_grads(&mut self) {
        for p in self.params.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.data.len()]);
            }
        }
    }

    /// Total scalar count, and the attention-only share.
    pub fn count_by_group(&self) -> (usize, usize) {
        let total = self.params.iter().map(Param::numel).sum();
        let attention = self
            .params
            .iter()
            .filter(|p| p.group == ParamGroup::Attention)
            .map(Param::numel)
            .sum();
        (total, attention)
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| SpemError::State(format!("no parameter named {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_accumulate_and_zero() {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![1.0, 2.0], vec![2], true, ParamGroup::Backbone);
        store.accumulate(0, &[0.5, 0.5]);
        store.accumulate(0, &[0.25, 0.25]);
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[0.75, 0.75]);
        store.zero_grad();
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn group_counts() {
        let mut store = ParamStore::new();
        store.register("a", vec![0.0; 10], vec![10], true, ParamGroup::Backbone);
        store.register("b", vec![0.0; 4], vec![4], false, ParamGroup::Attention);
        assert_eq!(store.count_by_group(), (14, 4));
    }
}
