use std::collections::BTreeMap;

use rand::Rng;

use crate::{Error, Gradients, Graph, Result, Scalar, Tensor, Var};

/// Named trainable arrays, iterated in name order so every traversal is
/// deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Registers every parameter as a leaf on `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Bound<T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
            graph: graph.clone(),
        }
    }
}

/// Parameters registered on a graph for one forward/backward pass.
pub struct Bound<T> {
    vars: BTreeMap<String, Var<T>>,
    graph: Graph<T>,
}

impl<T: Scalar> Bound<T> {
    pub fn var(&self, name: &str) -> Result<&Var<T>> {
        self.vars.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Gradient for every bound parameter (zeros where unreached).
    pub fn collect_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}
