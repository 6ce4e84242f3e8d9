use rand::Rng;

use crate::error::{Error, Result};

use super::layer::{Activation, DenseLayer, LayerCache};
use super::params::{visit_layer, visit_layer_mut, ParamBlock, Parameters};
use super::scalar::Scalar;

/// A stack of dense layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar = f64> {
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T: Scalar = f64> {
    caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.caches.last().map_or(&[], |c| c.output())
    }
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-initialized stack over `sizes[0] -> sizes[1] -> ...`, with
    /// `hidden` activations on every layer but the last.
    pub fn glorot<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, last: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                DenseLayer::glorot(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, MlpCache<T>)> {
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, MlpCache { caches }))
    }

    /// Backpropagates `upstream`, adding parameter gradients into `grads`
    /// (same architecture as `self`), and returns `∂L/∂x`.
    pub fn backward_into(&self, cache: &MlpCache<T>, upstream: &[T], grads: &mut Mlp<T>) -> Result<Vec<T>> {
        if cache.caches.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::Contract(
                "MLP cache or gradient buffer has the wrong depth".into(),
            ));
        }
        let mut g = upstream.to_vec();
        for ((layer, c), gl) in self.layers.iter().zip(&cache.caches).zip(grads.layers.iter_mut()).rev() {
            g = layer.backward_into(c, &g, &mut gl.weights, &mut gl.bias)?;
        }
        Ok(g)
    }

    pub fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            visit_layer(&format!("{prefix}.{i}"), layer, f);
        }
    }

    pub fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_layer_mut(&format!("{prefix}.{i}"), layer, f);
        }
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
        self.visit_prefixed("mlp", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.visit_prefixed_mut("mlp", f);
    }
}
