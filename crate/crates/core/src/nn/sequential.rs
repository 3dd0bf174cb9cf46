use ndarray::ArrayD;

use super::{Cache, Layer, Scalar};

/// An ordered chain of named layers forming one branch of a model graph.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub name: String,
    pub layers: Vec<(String, Layer<T>)>,
}

/// Per-layer caches from a training-mode forward pass.
#[derive(Debug)]
pub struct SequentialCache<T> {
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Sequential {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) {
        self.layers.push((name.into(), layer));
    }

    pub fn position(&self, layer_name: &str) -> Option<usize> {
        self.layers.iter().position(|(n, _)| n == layer_name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(_, l)| l.param_count()).sum()
    }

    /// `(full dotted name, tensor)` for every parameter, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &ArrayD<T>)> {
        let mut out = Vec::new();
        for (lname, layer) in &self.layers {
            for (pname, t) in layer.params() {
                out.push((format!("{}.{}.{}", self.name, lname, pname), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        self.layers
            .iter_mut()
            .flat_map(|(_, l)| l.params_mut())
            .collect()
    }

    pub fn forward(&self, x: &ArrayD<T>) -> ArrayD<T> {
        self.forward_until(x, self.layers.len())
    }

    /// Inference through the first `count` layers.
    pub fn forward_until(&self, x: &ArrayD<T>, count: usize) -> ArrayD<T> {
        let mut h = x.clone();
        for (_, layer) in &self.layers[..count] {
            h = layer.forward(&h, false).0;
        }
        h
    }

    pub fn forward_train(&self, x: &ArrayD<T>) -> (ArrayD<T>, SequentialCache<T>) {
        self.forward_train_until(x, self.layers.len())
    }

    pub fn forward_train_until(
        &self,
        x: &ArrayD<T>,
        count: usize,
    ) -> (ArrayD<T>, SequentialCache<T>) {
        let mut caches = Vec::with_capacity(count);
        let mut h = x.clone();
        for (_, layer) in &self.layers[..count] {
            let (y, cache) = layer.forward(&h, true);
            caches.push(cache.expect("training forward keeps caches"));
            h = y;
        }
        (h, SequentialCache { caches })
    }

    /// Back-propagate through the layers recorded in `cache`. `grads`, when
    /// given, holds one buffer per parameter of the *whole* branch.
    pub fn backward(
        &self,
        cache: &SequentialCache<T>,
        dy: ArrayD<T>,
        mut grads: Option<&mut [ArrayD<T>]>,
        need_dx: bool,
    ) -> Option<ArrayD<T>> {
        let count = cache.caches.len();
        let mut offsets = Vec::with_capacity(count);
        let mut off = 0;
        for (_, l) in &self.layers[..count] {
            offsets.push(off);
            off += l.param_count();
        }
        let mut d = dy;
        for i in (0..count).rev() {
            let layer = &self.layers[i].1;
            let pc = layer.param_count();
            let g = grads
                .as_deref_mut()
                .filter(|_| pc > 0)
                .map(|g| &mut g[offsets[i]..offsets[i] + pc]);
            let need = need_dx || i > 0;
            d = layer.backward(&cache.caches[i], &d, g, need)?;
        }
        Some(d)
    }
}
