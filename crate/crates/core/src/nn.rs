//! Parameter containers shared by the transformer, fusers and task head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor};

/// Anything owning named learnable tensors.
///
/// Names are dotted paths (`layers.0.attn.q.weight`); visitation order is
/// fixed and defines the checkpoint layout.
pub trait Params<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Gradients for every parameter of a [`bind`](Params::bind)-ed copy, in visit order.
    fn gradients(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::new();
        let mut missing = None;
        self.visit("", &mut |name, t| match grads.get(t) {
            Some(g) => out.push(g.clone()),
            None => missing = missing.take().or_else(|| Some(name.to_string())),
        });
        match missing {
            Some(name) => Err(Error::Format(format!("parameter `{name}` is not a leaf of this tape"))),
            None => Ok(out),
        }
    }

    /// A copy whose every parameter is a leaf on `tape`.
    fn bind(&self, tape: &Tape<T>) -> Self
    where
        Self: Clone + Sized,
    {
        let mut bound = self.clone();
        bound.visit_mut("", &mut |_, t| *t = tape.leaf(t));
        bound
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot/Xavier uniform in ±√(6 / (fan_in + fan_out)).
pub fn xavier_uniform<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_parts(&[fan_in, fan_out], data)
}

/// Affine map along the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: xavier_uniform(rng, fan_in, fan_out), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.project(x, &self.weight)?;
        tape.add_bias(&y, &self.bias)
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    pub fn new(channels: usize) -> Self {
        LayerNormParams { gamma: Tensor::ones(&[channels]), beta: Tensor::zeros(&[channels]) }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        tape.layer_norm(x, &self.gamma, &self.beta, eps)
    }
}

impl<T: Real> Params<T> for LayerNormParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Overwrites every parameter of `target` from `source` by name, checking shapes.
pub fn load_named<T: Real>(target: &mut impl Params<T>, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
    let mut failure = None;
    target.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match lookup(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                failure = Some(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            None => failure = Some(Error::Format(format!("missing parameter `{name}`"))),
        }
    });
    failure.map_or(Ok(()), Err)
}
