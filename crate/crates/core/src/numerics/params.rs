use std::collections::HashMap;

use super::element::Element;
use super::rng::Rng;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    tensors: Vec<Tensor<E>>,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    /// Uniform in ±1/√fan_in, the usual default for linear and conv weights.
    pub fn add_fan_in(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Shape>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let shape = shape.into();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| E::of(rng.uniform_range(-bound, bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Shape>,
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| E::of(rng.normal() * std)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: impl Into<Shape>, v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, E::of(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads<E>) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::shape(
                "param.set",
                format!("{name}: have {}, got {} values", t.shape(), data.len()),
            ));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            names: self.names.clone(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradient buffers produced by one backward pass.
#[derive(Clone, Debug)]
pub struct ParamGrads<E>(pub(crate) Vec<Option<Vec<E>>>);

impl<E: Element> ParamGrads<E> {
    pub fn empty(n: usize) -> Self {
        ParamGrads(vec![None; n])
    }

    pub fn get(&self, id: ParamId) -> Option<&[E]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds `other` into `self`; summation order is the caller's, so a fixed
    /// reduction order gives bit-identical totals.
    pub fn add_assign(&mut self, other: &ParamGrads<E>) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, &y) in a.iter_mut().zip(b) {
                        *x = *x + y;
                    }
                }
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: E) {
        for g in self.0.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
}
