//! Named parameter storage and initialization helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{}: {:?} vs {:?}", self.names[id.0], cur.shape(), t.shape()),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Register every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Creates parameters under a name prefix with a shared RNG.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::ones(shape))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = self.full_name(name);
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(n, t)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = self.full_name(name);
        let t = Tensor::rand_uniform(shape, -bound, bound, self.rng);
        self.store.add(n, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let n = self.full_name(name);
        let t = Tensor::rand_uniform(shape, lo, hi, self.rng);
        self.store.add(n, t)
    }

    pub fn random_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Dense `[in, out]` linear layer.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        init.scope(name, |i| Linear {
            w: i.fan_in_uniform("w", &[d_in, d_out], d_in),
            b: i.zeros("b", &[d_out]),
        })
    }

    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        init.scope(name, |i| Linear {
            w: i.zeros("w", &[d_in, d_out]),
            b: i.zeros("b", &[d_out]),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.w), Some(p.get(self.b)))
    }
}

/// Convolution with bias, `[O,C,k,k]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        init.scope(name, |i| Conv {
            w: i.fan_in_uniform("w", &[c_out, c_in, k, k], c_in * k * k),
            b: i.zeros("b", &[c_out]),
            stride,
            pad: k / 2,
        })
    }

    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        init.scope(name, |i| Conv {
            w: i.zeros("w", &[c_out, c_in, k, k]),
            b: i.zeros("b", &[c_out]),
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(x, p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize) -> Self {
        init.scope(name, |i| LayerNorm {
            gamma: i.ones("gamma", &[d]),
            beta: i.zeros("beta", &[d]),
        })
    }

    /// Normalize the last axis.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.layernorm(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }

    /// Normalize the channel axis of an `[N,C,H,W]` map.
    pub fn forward_channels<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.layernorm_channels(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}
