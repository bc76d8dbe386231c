use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal with the given fan-in.
    He { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name: name.to_string(), value, grad });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        let t = match init {
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        self.insert(name, t)
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

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Names of all parameters with the given prefix, in insertion order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params.iter().map(|p| p.name.as_str()).filter(move |n| n.starts_with(prefix))
    }

    /// Adds a backward sweep's parameter gradients into the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            for (d, s) in self.params[id.0].grad.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn accumulate_raw(&mut self, id: ParamId, g: &[f64]) {
        for (d, s) in self.params[id.0].grad.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
