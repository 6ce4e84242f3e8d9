//! The declarative run configuration: one flat JSON object, every field
//! required, every seed explicit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use spvae::evalmetrics::{EvalConfig, ProbeConfig};
use spvae::ndcore::AdamConfig;
use spvae::toycorpus::CorpusConfig;
use spvae::vae::{LossWeights, ModelDims, SystemVariant, TrainConfig, TripletConfig};
use spvae::verify::VerifierConfig;

use crate::failure::Failure;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,

    // Corpus
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub voice_dim: usize,
    pub n_contents: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub held_out_fraction: f64,

    // Model and training
    pub variant: SystemVariant,
    /// Must agree with the variant; kept explicit so a config file says
    /// what it does.
    pub shuffle: bool,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub beta_kl: f64,
    /// Used only by the triplet variants; the others train with 0.
    pub lambda_triplet: f64,
    pub triplet_alpha: f64,
    pub kl_warmup_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,

    // Verifier and evaluation
    pub verifier_steps: u64,
    pub n_synthetic_profiles: usize,
    pub percentiles: Vec<f64>,
    pub profile_counts: Vec<usize>,
    pub n_eval_seeds: usize,
    pub n_interpolation_pairs: usize,
    pub probe_noise_std: f64,
    pub probe_noise_draws: usize,

    // Seeds
    pub corpus_seed: u64,
    pub split_seed: u64,
    pub train_seed: u64,
    pub verifier_seed: u64,
    pub probe_seed: u64,
    pub eval_seed: u64,
}

impl RunConfig {
    /// The desk-scale defaults for one variant.
    pub fn defaults(variant: SystemVariant) -> Self {
        let corpus = CorpusConfig::default();
        let dims = ModelDims::new(corpus.feature_dim, corpus.frames, corpus.n_contents);
        let weights = LossWeights::default();
        let eval = EvalConfig::default();
        Self {
            format_version: RUN_CONFIG_VERSION,
            n_speakers: corpus.n_speakers,
            utts_per_speaker: corpus.utts_per_speaker,
            voice_dim: corpus.voice_dim,
            n_contents: corpus.n_contents,
            frames: corpus.frames,
            feature_dim: corpus.feature_dim,
            noise_std: corpus.noise_std,
            held_out_fraction: 0.25,
            variant,
            shuffle: variant.shuffles(),
            latent_dim: dims.latent_dim,
            encoder_hidden: dims.encoder_hidden,
            decoder_hidden: dims.decoder_hidden,
            beta_kl: weights.beta_kl,
            lambda_triplet: weights.lambda_triplet,
            triplet_alpha: weights.triplet.alpha,
            kl_warmup_fraction: 0.2,
            learning_rate: AdamConfig::default().learning_rate,
            batch_size: 16,
            train_steps: 6000,
            checkpoint_every: 500,
            verifier_steps: VerifierConfig::default().steps,
            n_synthetic_profiles: eval.n_synthetic_profiles,
            percentiles: eval.percentiles,
            profile_counts: eval.profile_counts,
            n_eval_seeds: eval.n_eval_seeds,
            n_interpolation_pairs: eval.n_interpolation_pairs,
            probe_noise_std: eval.probe.noise_std,
            probe_noise_draws: eval.probe.noise_draws,
            corpus_seed: 0,
            split_seed: 0,
            train_seed: 1,
            verifier_seed: VerifierConfig::default().seed,
            probe_seed: eval.probe.seed,
            eval_seed: eval.eval_seed,
        }
    }

    /// Parses and validates; serde names any missing or unknown field.
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Failure::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical serialization; this is what gets stored and hashed.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.format_version != RUN_CONFIG_VERSION {
            return Err(Failure::config(format!(
                "format_version: expected {RUN_CONFIG_VERSION}, found {}",
                self.format_version
            )));
        }
        if self.shuffle != self.variant.shuffles() {
            return Err(Failure::config(format!(
                "shuffle: variant {} requires shuffle = {}",
                self.variant,
                self.variant.shuffles()
            )));
        }
        if self.variant.uses_triplet() && !(self.lambda_triplet > 0.0) {
            return Err(Failure::config(format!(
                "lambda_triplet: variant {} needs a positive triplet weight",
                self.variant
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Failure::config("learning_rate: must be positive and finite"));
        }
        if self.train_steps == 0 || self.checkpoint_every == 0 {
            return Err(Failure::config("train_steps and checkpoint_every must be positive"));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 0.5) {
            return Err(Failure::config("held_out_fraction: must lie in (0, 0.5)"));
        }
        self.corpus_config().validate().map_err(Failure::from_core)?;
        self.train_config().validate().map_err(Failure::from_core)?;
        self.eval_config().validate().map_err(Failure::from_core)?;
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_speakers: self.n_speakers,
            utts_per_speaker: self.utts_per_speaker,
            voice_dim: self.voice_dim,
            n_contents: self.n_contents,
            frames: self.frames,
            feature_dim: self.feature_dim,
            noise_std: self.noise_std,
            seed: self.corpus_seed,
            ..CorpusConfig::default()
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            ..ModelDims::new(self.feature_dim, self.frames, self.n_contents)
        }
    }

    /// Training settings with the variant's forced weights applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::new(self.variant, self.model_dims(), self.train_steps, self.train_seed);
        tc.weights = LossWeights {
            beta_kl: if self.variant.is_baseline() { 0.0 } else { self.beta_kl },
            lambda_triplet: if self.variant.uses_triplet() {
                self.lambda_triplet
            } else {
                0.0
            },
            triplet: TripletConfig {
                alpha: self.triplet_alpha,
            },
        };
        tc.kl_warmup_fraction = self.kl_warmup_fraction;
        tc.adam.learning_rate = self.learning_rate;
        tc.batch_size = self.batch_size;
        tc
    }

    pub fn verifier_config(&self) -> VerifierConfig {
        VerifierConfig {
            seed: self.verifier_seed,
            steps: self.verifier_steps,
            ..VerifierConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_synthetic_profiles: self.n_synthetic_profiles,
            percentiles: self.percentiles.clone(),
            profile_counts: self.profile_counts.clone(),
            n_eval_seeds: self.n_eval_seeds,
            eval_seed: self.eval_seed,
            n_interpolation_pairs: self.n_interpolation_pairs,
            probe: ProbeConfig {
                noise_std: self.probe_noise_std,
                noise_draws: self.probe_noise_draws,
                seed: self.probe_seed,
                ..ProbeConfig::default()
            },
            ..EvalConfig::default()
        }
    }
}
