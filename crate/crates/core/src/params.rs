//! Named parameter tensors and their gradients.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Checks that `self` holds exactly the tensors of `layout`, same names,
    /// same order, same shapes.
    pub fn check_layout(&self, layout: &ParamStore) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for ((name, t), (want_name, want)) in self.iter().zip(layout.iter()) {
            if name != want_name {
                return Err(Error::config(format!(
                    "parameter `{name}` found where `{want_name}` was expected"
                )));
            }
            if t.dim() != want.dim() {
                return Err(Error::config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dim(),
                    want.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(())
    }
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    /// Elementwise mean of several gradient sets, summed in slice order.
    pub fn mean_of(sets: &[GradientSet]) -> Option<GradientSet> {
        let (first, rest) = sets.split_first()?;
        let mut total = first.clone();
        for s in rest {
            total.accumulate(s);
        }
        total.scale(1.0 / sets.len() as f64);
        Some(total)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Flattened values in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.iter().copied()).collect()
    }
}
