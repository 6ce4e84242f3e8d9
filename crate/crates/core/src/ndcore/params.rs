use crate::error::{Error, Result};

use super::layer::DenseLayer;
use super::scalar::Scalar;

/// Named view of one contiguous parameter array, handed to visitors.
#[derive(Debug)]
pub struct ParamBlock<'a, T> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [T],
}

/// A model whose trainable state is a fixed, ordered list of named arrays.
///
/// Block order is the layout shared by optimizers, gradient tapes and
/// checkpoints; `visit` and `visit_mut` must walk blocks identically.
pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(ParamBlock<'_, T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |b| n += b.data.len());
        n
    }

    /// `(name, shape)` of every block, in layout order.
    fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(&mut |b| out.push((b.name, b.shape)));
        out
    }

    fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |b| out.extend_from_slice(b.data));
        out
    }

    fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("Parameters::set_flat", (n, 1), (flat.len(), 1)));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(())
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, data| data.iter_mut().for_each(|x| *x = T::zero()));
    }
}

/// Visits a dense layer as two blocks, `<prefix>.weight` and `<prefix>.bias`.
pub(crate) fn visit_layer<T: Scalar>(prefix: &str, layer: &DenseLayer<T>, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
    f(ParamBlock {
        name: format!("{prefix}.weight"),
        shape: layer.weights.shape(),
        data: layer.weights.as_slice(),
    });
    f(ParamBlock {
        name: format!("{prefix}.bias"),
        shape: (layer.bias.len(), 1),
        data: &layer.bias,
    });
}

pub(crate) fn visit_layer_mut<T: Scalar>(prefix: &str, layer: &mut DenseLayer<T>, f: &mut dyn FnMut(&str, &mut [T])) {
    f(&format!("{prefix}.weight"), layer.weights.as_mut_slice());
    f(&format!("{prefix}.bias"), &mut layer.bias);
}

impl<T: Scalar> Parameters<T> for DenseLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
        visit_layer("layer", self, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        visit_layer_mut("layer", self, f);
    }
}

/// Gradient buffers with exactly the layout of the parameters they belong to.
///
/// The buffers are stored as a zeroed clone of the model, so every block of
/// the tape has the same name and shape as the matching parameter block.
#[derive(Debug, Clone)]
pub struct GradientTape<P> {
    grads: P,
}

impl<P> GradientTape<P> {
    pub fn for_params<T: Scalar>(params: &P) -> Self
    where
        P: Parameters<T> + Clone,
    {
        let mut grads = params.clone();
        grads.fill_zero();
        Self { grads }
    }

    pub fn zero<T: Scalar>(&mut self)
    where
        P: Parameters<T>,
    {
        self.grads.fill_zero();
    }

    pub fn grads(&self) -> &P {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut P {
        &mut self.grads
    }

    pub fn into_inner(self) -> P {
        self.grads
    }

    /// Fails unless the tape's layout equals `params`' layout.
    pub fn check_aligned<T: Scalar>(&self, params: &P) -> Result<()>
    where
        P: Parameters<T>,
    {
        if self.grads.layout() != params.layout() {
            return Err(Error::Contract(
                "gradient tape layout differs from parameter layout".into(),
            ));
        }
        Ok(())
    }

    /// `self += scale * other`, block by block.
    pub fn accumulate<T: Scalar>(&mut self, other: &GradientTape<P>, scale: T)
    where
        P: Parameters<T>,
    {
        let flat = other.grads.to_flat();
        let mut offset = 0;
        self.grads.visit_mut(&mut |_, data| {
            let n = data.len();
            for (d, &g) in data.iter_mut().zip(&flat[offset..offset + n]) {
                *d += scale * g;
            }
            offset += n;
        });
    }
}
