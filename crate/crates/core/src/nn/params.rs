use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Standard deviation of the Normal initialiser for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Flat, named parameter storage shared by all model components.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    /// Matrix drawn from Normal(0, INIT_STD); subject to weight decay.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        self.add(name, t, true)
    }

    /// Constant vector (bias, norm gain/offset); never decayed.
    pub fn add_const(&mut self, name: impl Into<String>, len: usize, value: f64) -> ParamId {
        self.add(name, Tensor::full(&[len], T::lit(value)), false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`; the returned vector is
    /// indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}
