//! Named parameter storage shared by the network and the optimizer.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Fan-in scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Every tensor in id order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replace every value from `(name, tensor)` pairs; names and shapes
    /// must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Data(format!("{} stored tensors, model has {}", entries.len(), self.values.len())));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Data(format!("tensor {i} is `{name}`, expected `{}`", self.names[i])));
            }
            if t.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }

    /// Put every parameter on the graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self.values.iter().map(|t| g.leaf(t.clone(), trainable)).collect::<Result<_>>()?;
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap handles already on a graph, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
