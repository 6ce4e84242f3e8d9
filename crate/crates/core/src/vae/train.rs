use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{lit, Adam, AdamConfig, Matrix, Parameters, Scalar};
use crate::sampler::{make_epoch_plan_indexed, EpochPlan, SpeakerIndex};
use crate::seeding::{rng_from, tags, Rng};
use crate::toycorpus::Corpus;

use super::loss::{
    kl_grad, kl_to_standard_normal, l1_grad, l1_slices, reparameterize, triplet_loss_grad, TripletConfig,
};
use super::model::{ModelDims, ModelParams};

/// The four compared ways of producing a speaker profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemVariant {
    BaselineLookup,
    Vae,
    VaeTriplet,
    VaeTripletShuffle,
}

impl SystemVariant {
    pub const ALL: [SystemVariant; 4] = [
        SystemVariant::BaselineLookup,
        SystemVariant::Vae,
        SystemVariant::VaeTriplet,
        SystemVariant::VaeTripletShuffle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemVariant::BaselineLookup => "baseline_lookup",
            SystemVariant::Vae => "vae",
            SystemVariant::VaeTriplet => "vae_triplet",
            SystemVariant::VaeTripletShuffle => "vae_triplet_shuffle",
        }
    }

    pub fn is_baseline(self) -> bool {
        self == SystemVariant::BaselineLookup
    }

    pub fn uses_triplet(self) -> bool {
        matches!(self, SystemVariant::VaeTriplet | SystemVariant::VaeTripletShuffle)
    }

    pub fn shuffles(self) -> bool {
        self == SystemVariant::VaeTripletShuffle
    }

    /// Whether the optimizer updates the parameter block `name`.
    pub fn trains_block(self, name: &str) -> bool {
        if name.starts_with("decoder.") {
            return true;
        }
        if self.is_baseline() {
            name.starts_with("baseline.")
        } else {
            name.starts_with("encoder.")
        }
    }
}

impl fmt::Display for SystemVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown system variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_kl: f64,
    pub lambda_triplet: f64,
    pub triplet: TripletConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_kl: 0.05,
            lambda_triplet: 1.0,
            triplet: TripletConfig::default(),
        }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_recon: f64,
    pub kl: f64,
    pub triplet: f64,
    pub total: f64,
    pub beta_kl: f64,
    pub lambda_triplet: f64,
}

/// One training example. For the baseline, `table_row` selects the lookup
/// embedding and `reference`/`triplet` are ignored.
#[derive(Debug, Clone)]
pub struct TrainExample<'a, T: Scalar = f64> {
    pub reference: &'a Matrix<T>,
    pub target: &'a Matrix<T>,
    pub content_id: usize,
    pub table_row: usize,
    /// `(positive, negative)` frames for a triplet anchored on `reference`.
    pub triplet: Option<(&'a Matrix<T>, &'a Matrix<T>)>,
    /// Reparameterization noise, `latent_dim` long.
    pub eps: Vec<T>,
}

fn finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

/// Total loss and its gradient for a batch. Deterministic in its inputs.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[TrainExample<'_, T>],
    weights: &LossWeights,
    variant: SystemVariant,
) -> Result<(LossBreakdown, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut grads = params.zeros_like();
    let inv_b: T = T::one() / T::from_usize(batch.len()).unwrap();
    let beta: T = lit(weights.beta_kl);
    let lambda: T = lit(weights.lambda_triplet);
    let (mut l1_sum, mut kl_sum, mut trip_sum) = (T::zero(), T::zero(), T::zero());

    for ex in batch {
        let target = ex.target.as_slice();
        if variant.is_baseline() {
            let row = params.baseline_table.row(ex.table_row).to_vec();
            let (out, dcache) = params.decode_with_cache(&row, ex.content_id)?;
            l1_sum += l1_slices(&out, target)?;
            let d_out = l1_grad(&out, target, inv_b);
            let dz = params.decoder_backward(&dcache, &d_out, &mut grads)?;
            for (g, d) in grads.baseline_table.row_mut(ex.table_row).iter_mut().zip(dz) {
                *g += d;
            }
            continue;
        }

        let (mu, sigma, ecache) = params.encode_with_cache(ex.reference)?;
        // Softplus underflows to exactly 0 once training diverges; the KL
        // term is then infinite.
        if sigma.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::NonFinite { term: "kl".into() });
        }
        let z = reparameterize(&mu, &sigma, &ex.eps)?;
        let (out, dcache) = params.decode_with_cache(&z, ex.content_id)?;
        l1_sum += l1_slices(&out, target)?;
        let d_out = l1_grad(&out, target, inv_b);
        let dz = params.decoder_backward(&dcache, &d_out, &mut grads)?;

        let kl = kl_to_standard_normal(&mu, &sigma)?;
        kl_sum += kl;
        let (kl_dmu, kl_dsigma) = kl_grad(&mu, &sigma);
        let scale_kl = beta * inv_b;
        let mut d_mu: Vec<T> = dz.iter().zip(&kl_dmu).map(|(&a, &b)| a + scale_kl * b).collect();
        let d_sigma: Vec<T> = dz
            .iter()
            .zip(&ex.eps)
            .zip(&kl_dsigma)
            .map(|((&a, &e), &b)| a * e + scale_kl * b)
            .collect();

        if variant.uses_triplet() && weights.lambda_triplet > 0.0 {
            if let Some((pos, neg)) = ex.triplet {
                let (mu_p, _, cache_p) = params.encode_with_cache(pos)?;
                let (mu_n, _, cache_n) = params.encode_with_cache(neg)?;
                let (t, ga, gp, gn) = triplet_loss_grad(&mu, &mu_p, &mu_n, weights.triplet)?;
                trip_sum += t;
                if t > T::zero() {
                    let s = lambda * inv_b;
                    for (d, g) in d_mu.iter_mut().zip(ga) {
                        *d += s * g;
                    }
                    let gp: Vec<T> = gp.into_iter().map(|g| s * g).collect();
                    let gn: Vec<T> = gn.into_iter().map(|g| s * g).collect();
                    params.encoder_backward(&cache_p, &gp, &[], &mut grads)?;
                    params.encoder_backward(&cache_n, &gn, &[], &mut grads)?;
                }
            }
        }
        params.encoder_backward(&ecache, &d_mu, &d_sigma, &mut grads)?;
    }

    let n = batch.len() as f64;
    let l1 = finite(l1_sum.to_f64().unwrap() / n, "l1_recon")?;
    let kl = finite(kl_sum.to_f64().unwrap() / n, "kl")?;
    let triplet = finite(trip_sum.to_f64().unwrap() / n, "triplet")?;
    let (beta_kl, lambda_triplet) = if variant.is_baseline() {
        (0.0, 0.0)
    } else if variant.uses_triplet() {
        (weights.beta_kl, weights.lambda_triplet)
    } else {
        (weights.beta_kl, 0.0)
    };
    let total = finite(l1 + beta_kl * kl + lambda_triplet * triplet, "total")?;
    if grads.to_flat().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            term: "gradient".into(),
        });
    }
    Ok((
        LossBreakdown {
            l1_recon: l1,
            kl,
            triplet,
            total,
            beta_kl,
            lambda_triplet,
        },
        grads,
    ))
}

/// Scalar total loss only, as consumed by finite-difference checks.
pub fn total_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[TrainExample<'_, T>],
    weights: &LossWeights,
    variant: SystemVariant,
) -> Result<T> {
    let (b, _) = loss_and_grads(params, batch, weights, variant)?;
    Ok(lit(b.total))
}

/// One Adam update on the blocks the variant trains.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    batch: &[TrainExample<'_, T>],
    optimizer: &mut Adam<T>,
    weights: &LossWeights,
    variant: SystemVariant,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = loss_and_grads(params, batch, weights, variant)?;
    optimizer.update(params, &grads, |name| variant.trains_block(name))?;
    Ok(breakdown)
}

// ---------------------------------------------------------------------------
// Full training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: SystemVariant,
    pub dims: ModelDims,
    pub weights: LossWeights,
    /// Fraction of `steps` over which β_kl ramps linearly from 0.
    pub kl_warmup_fraction: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: SystemVariant, dims: ModelDims, steps: u64, seed: u64) -> Self {
        Self {
            variant,
            dims,
            weights: LossWeights::default(),
            kl_warmup_fraction: 0.2,
            adam: AdamConfig::default(),
            batch_size: 16,
            steps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(Error::Config("kl_warmup_fraction must lie in [0, 1]".into()));
        }
        if !(self.weights.beta_kl >= 0.0 && self.weights.lambda_triplet >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        TripletConfig::new(self.weights.triplet.alpha)?;
        Ok(())
    }

    /// Loss weights in effect at `step` (KL warm-up applied).
    pub fn weights_at(&self, step: u64) -> LossWeights {
        let warm = (self.kl_warmup_fraction * self.steps as f64).ceil();
        let ramp = if warm <= 0.0 {
            1.0
        } else {
            ((step + 1) as f64 / warm).min(1.0)
        };
        LossWeights {
            beta_kl: self.weights.beta_kl * ramp,
            ..self.weights
        }
    }
}

/// Training state that can be checkpointed and resumed bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar = f64> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    /// Source of reparameterization noise.
    pub noise_rng: Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let (t, f) = corpus.frames_shape();
        if (config.dims.frames, config.dims.feature_dim, config.dims.n_contents) != (t, f, corpus.config.n_contents) {
            return Err(Error::Config(format!(
                "model dims {:?} do not match corpus frames {t}x{f} with {} contents",
                config.dims, corpus.config.n_contents
            )));
        }
        let params = ModelParams::init(config.dims.clone(), &corpus.train_speakers(), config.seed)?;
        let optimizer = Adam::new(config.adam, params.num_params());
        let noise_rng = rng_from(config.seed, &[tags::TRAIN_NOISE]);
        Ok(Self {
            config,
            params,
            optimizer,
            step: 0,
            noise_rng,
        })
    }

    pub fn steps_per_epoch(&self, n_entries: usize) -> u64 {
        n_entries.div_ceil(self.config.batch_size) as u64
    }

    /// Runs until `until` steps have been taken in total (capped at the
    /// configured step count). `on_step` sees every step's loss.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        frames: &[Matrix<T>],
        until: u64,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<()> {
        let until = until.min(self.config.steps);
        let index = SpeakerIndex::train(corpus);
        let n_entries = index.utterances().len();
        let spe = self.steps_per_epoch(n_entries);
        let mut plan: Option<EpochPlan> = None;
        while self.step < until {
            let epoch = self.step / spe;
            if plan.as_ref().is_none_or(|p| p.epoch != epoch) {
                plan = Some(make_epoch_plan_indexed(
                    &index,
                    epoch,
                    self.config.seed,
                    self.config.variant.shuffles(),
                )?);
            }
            let entries = &plan.as_ref().unwrap().entries;
            let b = (self.step % spe) as usize * self.config.batch_size;
            let chunk = &entries[b..(b + self.config.batch_size).min(entries.len())];
            let latent = self.config.dims.latent_dim;
            let mut batch = Vec::with_capacity(chunk.len());
            for e in chunk {
                let target = &corpus.utterances[e.target];
                let eps = if self.config.variant.is_baseline() {
                    Vec::new()
                } else {
                    (0..latent)
                        .map(|_| {
                            let x: f64 = StandardNormal.sample(&mut self.noise_rng);
                            lit(x)
                        })
                        .collect()
                };
                batch.push(TrainExample {
                    reference: &frames[e.reference],
                    target: &frames[e.target],
                    content_id: target.content_id as usize,
                    table_row: self.params.table_row_index(target.speaker_id)?,
                    triplet: e.triplet.map(|t| (&frames[t.positive], &frames[t.negative])),
                    eps,
                });
            }
            let weights = self.config.weights_at(self.step);
            let loss = train_step(
                &mut self.params,
                &batch,
                &mut self.optimizer,
                &weights,
                self.config.variant,
            )?;
            on_step(self.step, &loss);
            self.step += 1;
        }
        Ok(())
    }
}

/// Casts corpus frames to the training scalar type once.
pub fn corpus_frames<T: Scalar>(corpus: &Corpus) -> Vec<Matrix<T>> {
    corpus.utterances.iter().map(|u| u.frames.cast()).collect()
}
