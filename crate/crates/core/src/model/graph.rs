use std::ops::{Deref, DerefMut};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Real, Tape, Var};

/// A [`Tape`] that binds model parameters lazily, once per graph.
pub struct Graph<'p, T: Real> {
    tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// With `trainable` unset parameters enter as constants and no
    /// gradient bookkeeping is kept.
    pub fn new(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let value = self.params.by_index(i).value.clone();
        let v = self.tape.leaf(value, self.trainable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// `x @ W + b` for the parameter pair `{name}.w`, `{name}.b`.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.layer_norm(x, g, b)
    }

    /// Gradients for every parameter in registration order. A parameter
    /// that was never bound or received no gradient is a dead parameter and
    /// an error.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(self.bound.len());
        for (i, b) in self.bound.iter().enumerate() {
            let name = || self.params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
            let v = b.ok_or_else(|| Error::Contract(format!("dead parameter {}: not in graph", name())))?;
            let g = grads
                .take(v)
                .ok_or_else(|| Error::Contract(format!("dead parameter {}: no gradient", name())))?;
            out.push(g);
        }
        Ok(out)
    }
}
