//! Named trainable parameters in registration order.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, mut tensor: Tensor<T>) -> Result<usize> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Invalid(format!("duplicate parameter path {path}")));
        }
        tensor.set_requires_grad(true);
        let (idx, _) = self.entries.insert_full(path, tensor);
        Ok(idx)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_weight<R: Rng>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        self.insert(path, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_zeros(&mut self, path: impl Into<String>, shape: &[usize]) -> Result<usize> {
        self.insert(path, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, path: impl Into<String>, shape: &[usize]) -> Result<usize> {
        self.insert(path, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.entries.get_index_of(path)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(path)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor<T>) {
        let (k, v) = self.entries.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        self.entries.get_index_mut(idx).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Stores each gradient buffer on its tensor; entries without a gradient
    /// get `None`.
    pub fn attach_grads(&mut self, grads: &Gradients<T>) {
        for (idx, (_, tensor)) in self.entries.iter_mut().enumerate() {
            tensor.set_grad(grads.get(idx).map(<[T]>::to_vec));
        }
    }
}

/// Per-parameter gradient buffers, aligned with a [`ParamStore`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Self { slots: vec![None; len] }
    }

    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.slots.get(idx).and_then(|s| s.as_deref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub(crate) fn accumulate(&mut self, idx: usize, grad: &[T]) {
        match &mut self.slots[idx] {
            Some(existing) => {
                for (d, &s) in existing.iter_mut().zip(grad) {
                    *d = *d + s;
                }
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (idx, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                let scaled: Vec<T> = g.iter().map(|&v| v * scale).collect();
                self.accumulate(idx, &scaled);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}
