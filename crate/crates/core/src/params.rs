//! Named collections of learnable tensors.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learnable tensors in registration order. The order is part of the
/// checkpoint format and of optimizer state alignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::param(format!("parameter {name} registered twice")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    /// Glorot-uniform `fan_in×fan_out` weight.
    pub fn insert_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::uniform(&[fan_in, fan_out], bound, rng))
    }

    pub fn insert_bias(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::param(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::param(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar learnables.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), true)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    /// Binding from explicit `(name, var)` pairs, e.g. leaves created by a
    /// gradient checker.
    pub fn new(vars: Vec<(String, Var)>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::param(format!("no bound parameter named {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }
}
