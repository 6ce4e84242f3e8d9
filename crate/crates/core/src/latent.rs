//! Synthetic speaker profiles: prior draws, interpolations and encodings.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{lit, Matrix, Scalar};
use crate::vae::ModelParams;

/// Where a profile came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    PriorSample { seed: u64, index: u64 },
    Interpolation { z1_ref: String, z2_ref: String, w: f64 },
    Encoded { utterance_ref: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SyntheticProfile<T: Scalar = f64> {
    pub provenance: Provenance,
    pub z: Vec<T>,
}

/// One draw from `N(0, I)` in `dim` dimensions. `seed`/`index` only label
/// the provenance; the draw itself comes from `rng`.
pub fn sample_prior<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R, seed: u64, index: u64) -> SyntheticProfile<T> {
    let z = (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            lit(x)
        })
        .collect();
    SyntheticProfile {
        provenance: Provenance::PriorSample { seed, index },
        z,
    }
}

/// `w·z1 + (1 − w)·z2` for `w ∈ [0, 1]`.
pub fn interpolate<T: Scalar>(z1: &[T], z2: &[T], w: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::domain(format!("interpolation weight {w} outside [0, 1]")));
    }
    if z1.len() != z2.len() {
        return Err(Error::shape("interpolate", (z1.len(), 1), (z2.len(), 1)));
    }
    // The endpoints are returned as copies so they hold exactly.
    if w == 1.0 {
        return Ok(z1.to_vec());
    }
    if w == 0.0 {
        return Ok(z2.to_vec());
    }
    // Fix the larger coefficient first and derive the smaller as 1 − large,
    // which is exact for large ∈ [0.5, 1]. Swapping the endpoints and
    // passing 1 − w then yields identical coefficients and bits.
    let (large_z, small_z, large) = if w >= 0.5 { (z1, z2, w) } else { (z2, z1, 1.0 - w) };
    let small: T = lit(1.0 - large);
    let large: T = lit(large);
    Ok(large_z
        .iter()
        .zip(small_z)
        .map(|(&x, &y)| large * x + small * y)
        .collect())
}

pub fn interpolate_profiles<T: Scalar>(
    z1: &SyntheticProfile<T>,
    z1_ref: &str,
    z2: &SyntheticProfile<T>,
    z2_ref: &str,
    w: f64,
) -> Result<SyntheticProfile<T>> {
    Ok(SyntheticProfile {
        provenance: Provenance::Interpolation {
            z1_ref: z1_ref.into(),
            z2_ref: z2_ref.into(),
            w,
        },
        z: interpolate(&z1.z, &z2.z, w)?,
    })
}

/// Deterministic encoding: the posterior mean.
pub fn encode_profile<T: Scalar>(
    params: &ModelParams<T>,
    frames: &Matrix<T>,
    utterance_ref: &str,
) -> Result<SyntheticProfile<T>> {
    Ok(SyntheticProfile {
        provenance: Provenance::Encoded {
            utterance_ref: utterance_ref.into(),
        },
        z: params.encode_mean(frames)?,
    })
}

pub fn save_profiles<T: Scalar>(path: &Path, profiles: &[SyntheticProfile<T>]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(profiles)?)?;
    Ok(())
}

pub fn load_profiles<T: Scalar>(path: &Path) -> Result<Vec<SyntheticProfile<T>>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
