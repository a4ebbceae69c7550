use std::collections::HashMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Seeded initialiser: uniform in `±sqrt(1 / fan_in)`.
pub struct Init {
    rng: Xoshiro256PlusPlus,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replace a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", self.names[id.0], self.tensors[id.0].shape(), value.shape()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Apply `f` to every parameter value in place.
    pub fn update(&mut self, mut f: impl FnMut(ParamId, &mut [f64])) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let shape = t.shape().to_vec();
            let mut data = std::mem::replace(t, Tensor::scalar(0.0)).into_data();
            f(ParamId(i), &mut data);
            *t = Tensor::from_parts(shape, data);
        }
    }

    pub fn zero_all(&mut self) {
        self.update(|_, d| d.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Put every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Put every parameter on the tape as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape handles for every parameter of a store.
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
