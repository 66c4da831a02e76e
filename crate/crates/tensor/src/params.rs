use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape leaves for every parameter of a store, valid for one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name and enables its gradient.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument {
                op: "ParamStore::insert",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let cur = &mut self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        cur.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Puts every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Adds the gradients of the bound leaves into the stored buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let (Some(src), Some(dst)) = (grads.get(v), t.grad_mut()) {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values (not gradients) of every parameter.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.iter().map(Tensor::detached).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.tensors.len(), "snapshot from a different store");
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            t.data_mut().copy_from_slice(s.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros([2])).unwrap();
        assert!(s.insert("w", Tensor::zeros([2])).is_err());
        assert!(s.by_name("w").unwrap().requires_grad());
        assert!(matches!(s.by_name("x"), Err(TensorError::UnknownParameter(_))));
    }

    #[test]
    fn gradients_flow_back_into_store() {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape);
            let sq = tape.mul(b.var(w), b.var(w)).unwrap();
            let l = tape.sum(sq).unwrap();
            let g = tape.backward(l).unwrap();
            s.accumulate(&b, &g);
        }
        assert_eq!(s.get(w).grad().unwrap(), &[4.0, 8.0]);
        s.zero_grad();
        assert_eq!(s.get(w).grad().unwrap(), &[0.0, 0.0]);
    }
}
