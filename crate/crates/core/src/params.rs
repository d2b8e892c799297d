//! Named parameter tensors owned by a model.

use std::ops::Index;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Adjacency matrix; frozen when graphs are configured as fixed.
    Graph,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Entries marked `false` are structural zeros that never change.
    pub mask: Option<Vec<bool>>,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Parameters placed on a tape, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.push(name.into(), value, kind, None)
    }

    pub fn add_masked(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        mask: Vec<bool>,
    ) -> ParamId {
        assert_eq!(mask.len(), value.len(), "mask size");
        self.push(name.into(), value, ParamKind::Graph, Some(mask))
    }

    fn push(
        &mut self,
        name: String,
        value: Tensor,
        kind: ParamKind,
        mask: Option<Vec<bool>>,
    ) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            mask,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
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

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value, keeping the shape and re-zeroing masked entries.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "param set",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        if let Some(mask) = &p.mask {
            crate::graphs::apply_mask(mask, &mut p.value);
        }
        Ok(())
    }

    pub fn set_frozen_kind(&mut self, kind: ParamKind, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.kind == kind) {
            p.frozen = frozen;
        }
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn entry_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        )
    }

    /// One gradient per parameter (zeros where nothing flowed).
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound.vars())
            .map(|(p, &v)| grads.wrt_or_zeros(v, &p.value))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_checks_shape_and_reapplies_mask() {
        let mut store = ParamStore::new();
        let id = store.add_masked("t0", Tensor::zeros(&[2, 2]), vec![false, true, true, false]);
        store
            .set(
                id,
                Tensor::new(vec![2, 2], vec![5.0, 1.0, 2.0, 5.0]).unwrap(),
            )
            .unwrap();
        assert_eq!(store.get(id).data(), &[0.0, 1.0, 2.0, 0.0]);
        assert!(store.set(id, Tensor::zeros(&[4])).is_err());
        assert_eq!(store.find("t0"), Some(id));
    }

    #[test]
    fn grads_line_up_with_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0), ParamKind::Weight);
        let b = store.add("b", Tensor::scalar(3.0), ParamKind::Bias);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let y = tape.mul(bound[a], bound[a]).unwrap();
        let g = tape.backward(y).unwrap();
        let grads = store.collect_grads(&bound, &g);
        assert_eq!(grads[a.index()].item(), 4.0);
        assert_eq!(grads[b.index()].item(), 0.0);
    }
}
