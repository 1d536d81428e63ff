//! Trainable-parameter registry shared by the fusion model and trainer.
//!
//! Frozen tensors (encoder weights, routing keys) never appear here; the
//! optimizer's parameter set is exactly the contents of a `ParamStore`.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// prompts, experts, router, mapper, head (feed the main encoder)
    Main,
    /// complementary-encoder vanilla prompts
    Complementary,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

pub type ParamId = usize;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.params[id].value.shape(), value.shape());
        self.params[id].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Lazily binds store parameters onto one tape as tracked leaves, so a
/// parameter used several times shares a single tape handle.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Binder {
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let v = tape.leaf(store.value(id).clone())?;
        self.vars[id] = Some(v);
        Ok(v)
    }

    /// Gradient per parameter after backward; `None` for parameters that
    /// were never bound or received no gradient.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    pub fn bound_var(&self, id: ParamId) -> Result<Var> {
        self.vars[id].ok_or_else(|| Error::Contract(format!("param {id} not bound")))
    }
}
