use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::params::Parameters;
use super::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of coordinates to probe; all coordinates when larger than the model.
    pub samples: usize,
    /// Lower bound on the relative-error denominator. Coordinates whose true
    /// gradient is zero see roundoff of order `ε·|loss| / step`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 200,
            floor: 1e-8,
        }
    }
}

/// Compares `analytic` against central differences of `loss` around
/// `params` and returns the largest relative error
/// `|a - n| / max(|a|, |n|, floor)` over the sampled coordinates.
///
/// `loss` must be deterministic: any noise (e.g. reparameterization draws)
/// has to be fixed by the caller.
pub fn grad_check<T, P, F, R>(params: &P, analytic: &P, mut loss: F, config: GradCheckConfig, rng: &mut R) -> Result<T>
where
    T: Scalar,
    P: Parameters<T> + Clone,
    F: FnMut(&P) -> Result<T>,
    R: Rng + ?Sized,
{
    let base = params.to_flat();
    let grad = analytic.to_flat();
    if base.len() != grad.len() {
        return Err(Error::shape("grad_check", (base.len(), 1), (grad.len(), 1)));
    }
    let coords: Vec<usize> = if config.samples >= base.len() {
        (0..base.len()).collect()
    } else {
        let mut picked = sample(rng, base.len(), config.samples).into_vec();
        picked.sort_unstable();
        picked
    };
    let h: T = lit(config.step);
    let floor: T = lit(config.floor);
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst = T::zero();
    for i in coords {
        flat[i] = base[i] + h;
        probe.set_flat(&flat)?;
        let up = finite(loss(&probe)?, "grad_check(+h)")?;
        flat[i] = base[i] - h;
        probe.set_flat(&flat)?;
        let down = finite(loss(&probe)?, "grad_check(-h)")?;
        flat[i] = base[i];
        let numeric = (up - down) / (h + h);
        let a = grad[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn finite<T: Scalar>(x: T, term: &str) -> Result<T> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}
