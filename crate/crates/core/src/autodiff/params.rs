use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Adds seeded normal noise to every entry.
    pub fn jitter(&mut self, rng: &mut Rng, std: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v += T::from_f64(std * rng.normal());
            }
        }
    }
}
