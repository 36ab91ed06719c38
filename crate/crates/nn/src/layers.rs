//! Parameterized building blocks. Each layer only stores parameter names; the
//! arrays live in a [`ParamStore`] so whole models serialize as one flat map.

use rand::Rng;

use crate::params::init_uniform;
use crate::{Bound, ParamStore, Result, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let layer = Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        };
        store.insert(&layer.weight, init_uniform(&[out, inp], inp, rng));
        store.insert(&layer.bias, init_uniform(&[out], inp, rng));
        layer
    }

    /// Weights and bias start at exactly zero, so the layer outputs zeros.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize) -> Self {
        let layer = Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        };
        store.insert(&layer.weight, Tensor::zeros(&[out, inp]));
        store.insert(&layer.bias, Tensor::zeros(&[out]));
        layer
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.linear(p.var(&self.weight)?, Some(p.var(&self.bias)?))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: String,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let layer = Self::names(name, kernel, stride);
        let fan_in = inp * kernel * kernel;
        store.insert(&layer.weight, init_uniform(&[out, inp, kernel, kernel], fan_in, rng));
        store.insert(&layer.bias, init_uniform(&[out], fan_in, rng));
        layer
    }

    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let layer = Self::names(name, kernel, stride);
        store.insert(&layer.weight, Tensor::zeros(&[out, inp, kernel, kernel]));
        store.insert(&layer.bias, Tensor::zeros(&[out]));
        layer
    }

    fn names(name: &str, kernel: usize, stride: usize) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.conv2d(p.var(&self.weight)?, Some(p.var(&self.bias)?), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let layer = Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            groups: groups.min(channels).max(1),
        };
        store.insert(&layer.gamma, Tensor::ones(&[channels]));
        store.insert(&layer.beta, Tensor::zeros(&[channels]));
        layer
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.group_norm(self.groups, p.var(&self.gamma)?, p.var(&self.beta)?, Self::EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: String,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let layer = Self {
            table: format!("{name}.table"),
        };
        store.insert(&layer.table, Tensor::randn(&[rows, dim], 0.02, rng));
        layer
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, ids: &[usize]) -> Result<Var<T>> {
        p.var(&self.table)?.gather_rows(ids)
    }
}
