//! Loss terms and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{lit, Matrix, Scalar};

/// Margin configuration for the triplet term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub alpha: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl TripletConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::domain(format!("triplet margin must be >= 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

fn check_sigma<T: Scalar>(sigma: &[T]) -> Result<()> {
    if let Some(i) = sigma.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::domain(format!("sigma[{i}] = {} is not positive", sigma[i])));
    }
    Ok(())
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, (a, 1), (b, 1)));
    }
    Ok(())
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize<T: Scalar>(mu: &[T], sigma: &[T], eps: &[T]) -> Result<Vec<T>> {
    check_len("reparameterize", mu.len(), sigma.len())?;
    check_len("reparameterize", mu.len(), eps.len())?;
    check_sigma(sigma)?;
    Ok(mu.iter().zip(sigma).zip(eps).map(|((&m, &s), &e)| m + s * e).collect())
}

/// `KL(N(mu, diag sigma²) ‖ N(0, I)) = -½ Σ (1 + ln σ² − μ² − σ²)`.
pub fn kl_to_standard_normal<T: Scalar>(mu: &[T], sigma: &[T]) -> Result<T> {
    check_len("kl_to_standard_normal", mu.len(), sigma.len())?;
    check_sigma(sigma)?;
    let half: T = lit(0.5);
    let two: T = lit(2.0);
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| -half * (T::one() + two * s.ln() - m * m - s * s))
        .sum())
}

/// Gradient of [`kl_to_standard_normal`]: `(μ, σ − 1/σ)`.
pub fn kl_grad<T: Scalar>(mu: &[T], sigma: &[T]) -> (Vec<T>, Vec<T>) {
    (mu.to_vec(), sigma.iter().map(|&s| s - T::one() / s).collect())
}

#[inline]
pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `max(‖a − p‖² − ‖a − n‖² + α, 0)`.
pub fn triplet_loss<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T], cfg: TripletConfig) -> Result<T> {
    check_len("triplet_loss", anchor.len(), positive.len())?;
    check_len("triplet_loss", anchor.len(), negative.len())?;
    let raw = squared_distance(anchor, positive) - squared_distance(anchor, negative) + lit(cfg.alpha);
    Ok(raw.max(T::zero()))
}

/// Loss value and gradients with respect to `(anchor, positive, negative)`.
/// The hinge is treated as inactive when the loss is exactly zero.
#[allow(clippy::type_complexity)]
pub fn triplet_loss_grad<T: Scalar>(
    anchor: &[T],
    positive: &[T],
    negative: &[T],
    cfg: TripletConfig,
) -> Result<(T, Vec<T>, Vec<T>, Vec<T>)> {
    let loss = triplet_loss(anchor, positive, negative, cfg)?;
    let n = anchor.len();
    if loss <= T::zero() {
        return Ok((loss, vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]));
    }
    let two: T = lit(2.0);
    let mut ga = Vec::with_capacity(n);
    let mut gp = Vec::with_capacity(n);
    let mut gn = Vec::with_capacity(n);
    for i in 0..n {
        ga.push(two * (negative[i] - positive[i]));
        gp.push(-two * (anchor[i] - positive[i]));
        gn.push(two * (anchor[i] - negative[i]));
    }
    Ok((loss, ga, gp, gn))
}

/// Mean absolute element-wise difference.
pub fn reconstruction_l1<T: Scalar>(predicted: &Matrix<T>, target: &Matrix<T>) -> Result<T> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape("reconstruction_l1", predicted.shape(), target.shape()));
    }
    l1_slices(predicted.as_slice(), target.as_slice())
}

pub(crate) fn l1_slices<T: Scalar>(predicted: &[T], target: &[T]) -> Result<T> {
    check_len("reconstruction_l1", predicted.len(), target.len())?;
    if predicted.is_empty() {
        return Ok(T::zero());
    }
    let sum: T = predicted.iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(sum / T::from_usize(predicted.len()).unwrap())
}

/// `∂ mean|p − t| / ∂p`, using `sign(0) = 0`.
pub(crate) fn l1_grad<T: Scalar>(predicted: &[T], target: &[T], scale: T) -> Vec<T> {
    let n = T::from_usize(predicted.len().max(1)).unwrap();
    predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d > T::zero() {
                scale / n
            } else if d < T::zero() {
                -scale / n
            } else {
                T::zero()
            }
        })
        .collect()
}
