use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::scalar::{lit, sigmoid, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the pre-activation, given both the
    /// pre-activation `x` and the activation output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Fully connected layer `y = activation(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T: Scalar = f64> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

/// What `forward` remembers for `backward`.
#[derive(Debug, Clone)]
pub struct LayerCache<T: Scalar = f64> {
    input: Vec<T>,
    pre: Vec<T>,
    output: Vec<T>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn pre_activation(&self) -> &[T] {
        &self.pre
    }

    pub fn output(&self) -> &[T] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T: Scalar = f64> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("DenseLayer::new", weights.shape(), (bias.len(), 1)));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
            activation,
        }
    }

    /// Glorot/Xavier uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = glorot_limit(input, output);
        let weights = Matrix::from_fn(output, input, |_, _| lit(rng.random_range(-limit..=limit)));
        Self {
            weights,
            bias: vec![T::zero(); output],
            activation,
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Forward pass without keeping a cache.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        let mut y = self.weights.matvec(x)?;
        for (v, &b) in y.iter_mut().zip(&self.bias) {
            *v = self.activation.apply(*v + b);
        }
        Ok(y)
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, LayerCache<T>)> {
        let mut pre = self.weights.matvec(x)?;
        for (v, &b) in pre.iter_mut().zip(&self.bias) {
            *v += b;
        }
        let output: Vec<T> = pre.iter().map(|&p| self.activation.apply(p)).collect();
        let cache = LayerCache {
            input: x.to_vec(),
            pre,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Returns `∂L/∂x` and the parameter gradients for one example.
    pub fn backward(&self, cache: &LayerCache<T>, upstream: &[T]) -> Result<(Vec<T>, LayerGrads<T>)> {
        let mut grads = LayerGrads {
            weights: Matrix::zeros(self.output_dim(), self.input_dim()),
            bias: vec![T::zero(); self.output_dim()],
        };
        let input_grad = self.backward_into(cache, upstream, &mut grads.weights, &mut grads.bias)?;
        Ok((input_grad, grads))
    }

    /// Like [`backward`](Self::backward) but accumulates parameter gradients
    /// into the given buffers, which avoids an allocation per frame.
    pub fn backward_into(
        &self,
        cache: &LayerCache<T>,
        upstream: &[T],
        weight_grad: &mut Matrix<T>,
        bias_grad: &mut [T],
    ) -> Result<Vec<T>> {
        self.check_cache(cache)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(
                "DenseLayer::backward",
                self.weights.shape(),
                (upstream.len(), 1),
            ));
        }
        if weight_grad.shape() != self.weights.shape() || bias_grad.len() != self.bias.len() {
            return Err(Error::shape(
                "DenseLayer::backward(grad buffer)",
                self.weights.shape(),
                weight_grad.shape(),
            ));
        }
        let delta: Vec<T> = cache
            .pre
            .iter()
            .zip(&cache.output)
            .zip(upstream)
            .map(|((&x, &y), &g)| g * self.activation.derivative(x, y))
            .collect();
        weight_grad.add_outer(T::one(), &delta, &cache.input)?;
        for (b, &d) in bias_grad.iter_mut().zip(&delta) {
            *b += d;
        }
        self.weights.matvec_transposed(&delta)
    }

    fn check_cache(&self, cache: &LayerCache<T>) -> Result<()> {
        if cache.input.len() != self.input_dim() || cache.pre.len() != self.output_dim() {
            return Err(Error::Contract(format!(
                "layer cache shaped ({} -> {}) does not belong to layer ({} -> {})",
                cache.input.len(),
                cache.pre.len(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// Bound of the Glorot/Xavier uniform distribution.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
