//! Dense linear algebra and differentiable layers with hand-written gradients.
//!
//! Everything here is generic over [`Scalar`]; the rest of the crate mostly
//! instantiates it at `f64` because gradient checks at `1e-4` relative
//! tolerance are not dependable in single precision.

mod gradcheck;
mod layer;
mod matrix;
mod mlp;
mod optim;
mod params;
mod scalar;

pub use gradcheck::{grad_check, GradCheckConfig};
pub use layer::{glorot_limit, Activation, DenseLayer, LayerCache, LayerGrads};
pub use matrix::dot;
pub use matrix::Matrix;
pub use mlp::{Mlp, MlpCache};
pub use optim::{Adam, AdamConfig};
pub use params::{GradientTape, ParamBlock, Parameters};
pub use scalar::{lit, sigmoid, softplus, Scalar};
