use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::interpolate;
use crate::ndcore::{lit, Matrix, Scalar};
use crate::seeding::{rng_from, tags};
use crate::toycorpus::Corpus;
use crate::vae::{ModelParams, SystemVariant};
use crate::verify::{
    cosine_similarity, far_at_threshold, natural_trials, threshold_from_percentile, TrialSet, Verifier,
};

use nalgebra::{DMatrix, DVector};

use super::linear::{argmax, r_squared, LinearClassifier, LinearMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Standard deviation of the channel noise added before classification.
    pub noise_std: f64,
    /// Noise draws per decoded utterance.
    pub noise_draws: usize,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            noise_std: 4.0,
            noise_draws: 200,
            min_accuracy: 0.90,
            seed: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_synthetic_profiles: usize,
    pub percentiles: Vec<f64>,
    pub interpolation_grid: Vec<f64>,
    pub profile_counts: Vec<usize>,
    pub n_eval_seeds: usize,
    pub eval_seed: u64,
    pub n_interpolation_pairs: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_synthetic_profiles: 200,
            percentiles: vec![60.0, 70.0, 80.0],
            interpolation_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            profile_counts: vec![1, 50, 100],
            n_eval_seeds: 5,
            eval_seed: 9,
            n_interpolation_pairs: 10,
            probe: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.percentiles.is_empty() || self.percentiles.iter().any(|&p| !(p > 0.0 && p < 100.0)) {
            return Err(Error::Config(format!(
                "percentiles must lie in (0, 100): {:?}",
                self.percentiles
            )));
        }
        let g = &self.interpolation_grid;
        if g.is_empty() || g.iter().any(|&w| !(0.0..=1.0).contains(&w)) || g.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "interpolation grid must be sorted within [0, 1]: {g:?}"
            )));
        }
        if g.last() != Some(&1.0) {
            return Err(Error::Config("interpolation grid must end at w = 1".into()));
        }
        if self.n_synthetic_profiles < 2 || self.n_eval_seeds == 0 || self.profile_counts.contains(&0) {
            return Err(Error::Config("profile and seed counts must be positive".into()));
        }
        if self.probe.noise_draws == 0 || self.probe.noise_std < 0.0 {
            return Err(Error::Config("probe noise settings are invalid".into()));
        }
        Ok(())
    }
}

/// A trained profile model as seen by the metrics.
#[derive(Debug, Clone, Copy)]
pub struct TrainedSystem<'a, T: Scalar = f64> {
    pub variant: SystemVariant,
    pub params: &'a ModelParams<T>,
    pub steps_trained: u64,
}

impl<'a, T: Scalar> TrainedSystem<'a, T> {
    pub fn new(variant: SystemVariant, params: &'a ModelParams<T>, steps_trained: u64) -> Result<Self> {
        if steps_trained == 0 {
            return Err(Error::Contract(format!("system {variant} has not been trained")));
        }
        Ok(Self {
            variant,
            params,
            steps_trained,
        })
    }

    /// New profiles. Generative variants draw from the N(0, I) prior. The
    /// lookup baseline has no generative model: it can only reuse the
    /// embedding of a training speaker, so it draws table rows uniformly
    /// with replacement.
    pub fn sample_profiles<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<T>> {
        let table = &self.params.baseline_table;
        (0..n)
            .map(|_| {
                if self.variant.is_baseline() {
                    table.row(rng.random_range(0..table.rows())).to_vec()
                } else {
                    (0..self.params.dims.latent_dim)
                        .map(|_| {
                            let x: f64 = StandardNormal.sample(rng);
                            lit(x)
                        })
                        .collect()
                }
            })
            .collect()
    }

    /// Profile of a natural utterance: its posterior mean, or the table row
    /// of its speaker for the baseline.
    pub fn profile_of(&self, corpus: &Corpus, frames: &[Matrix<T>], utterance: usize) -> Result<Vec<T>> {
        if self.variant.is_baseline() {
            self.params.baseline_embed(corpus.utterances[utterance].speaker_id)
        } else {
            self.params.encode_mean(&frames[utterance])
        }
    }

    pub fn synthesize(&self, z: &[T], content_id: usize) -> Result<Matrix<T>> {
        self.params.decode(z, content_id)
    }
}

// ---------------------------------------------------------------------------
// Distinctiveness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub percentile: f64,
    pub threshold: f64,
}

/// Genuine-pair scores on natural utterances of the verifier's held-out
/// speakers, and the thresholds at the requested percentiles.
pub fn calibrate_thresholds<T: Scalar>(
    verifier: &Verifier<T>,
    corpus: &Corpus,
    frames: &[Matrix<T>],
    percentiles: &[f64],
) -> Result<(Vec<f64>, Vec<Threshold>)> {
    let trials = natural_trials(&verifier.params, corpus, frames, &verifier.held_out_speakers)?;
    let genuine = trials.genuine_scores();
    let thresholds = percentiles
        .iter()
        .map(|&p| {
            Ok(Threshold {
                percentile: p,
                threshold: threshold_from_percentile(&genuine, p)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((genuine, thresholds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarRow {
    pub far: Vec<f64>,
    /// Scores of every synthetic-profile pair, in `(i, j)`, `i < j` order.
    pub scores: Vec<f64>,
}

/// FAR among pairs of utterances synthesized from `n` new profiles, each
/// speaking one content id drawn uniformly.
pub fn eval_distinctiveness<T: Scalar, R: Rng + ?Sized>(
    system: &TrainedSystem<'_, T>,
    verifier: &Verifier<T>,
    thresholds: &[Threshold],
    n_profiles: usize,
    rng: &mut R,
) -> Result<FarRow> {
    let profiles = system.sample_profiles(n_profiles, rng);
    let n_contents = system.params.dims.n_contents;
    let mut embs = Vec::with_capacity(n_profiles);
    for z in &profiles {
        let content = rng.random_range(0..n_contents);
        embs.push(verifier.params.embed(&system.synthesize(z, content)?)?);
    }
    // Every synthetic profile is its own identity.
    let labels: Vec<u32> = (0..n_profiles as u32).collect();
    let trials = TrialSet::all_pairs(&embs, &labels)?;
    let far = thresholds
        .iter()
        .map(|t| far_at_threshold(&trials, t.threshold))
        .collect::<Result<_>>()?;
    Ok(FarRow {
        far,
        scores: trials.trials.iter().map(|t| t.score).collect(),
    })
}

// ---------------------------------------------------------------------------
// Similarity along an interpolation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub utterance_1: usize,
    pub utterance_2: usize,
    pub content_id: usize,
    pub points: Vec<(f64, f64)>,
    /// Verifier embeddings of the decoded utterances, one per grid point.
    pub embeddings: Vec<Vec<f64>>,
}

impl SimilarityCurve {
    /// Largest decrease between neighbouring grid points, read from w = 1
    /// towards w = 0.
    pub fn max_adjacent_drop(&self) -> f64 {
        self.points
            .windows(2)
            .map(|p| p[1].1 - p[0].1)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether the curve never rises by more than `tolerance` when moving
    /// from w = 1 towards w = 0.
    pub fn weakly_decreasing(&self, tolerance: f64) -> bool {
        self.points.windows(2).all(|p| p[0].1 - p[1].1 <= tolerance)
    }
}

/// Cosine similarity between the verifier embedding of the utterance decoded
/// at each `z_w` and the one decoded at `w = 1`.
pub fn eval_similarity_curve<T: Scalar>(
    system: &TrainedSystem<'_, T>,
    verifier: &Verifier<T>,
    corpus: &Corpus,
    frames: &[Matrix<T>],
    pair: (usize, usize),
    content_id: usize,
    grid: &[f64],
) -> Result<SimilarityCurve> {
    let (u1, u2) = pair;
    if corpus.utterances[u1].speaker_id == corpus.utterances[u2].speaker_id {
        return Err(Error::domain(
            "similarity curve needs utterances of two different speakers",
        ));
    }
    if grid.last() != Some(&1.0) {
        return Err(Error::domain("interpolation grid must end at w = 1"));
    }
    let z1 = system.profile_of(corpus, frames, u1)?;
    let z2 = system.profile_of(corpus, frames, u2)?;
    let embs: Vec<Vec<T>> = grid
        .iter()
        .map(|&w| {
            verifier
                .params
                .embed(&system.synthesize(&interpolate(&z1, &z2, w)?, content_id)?)
        })
        .collect::<Result<_>>()?;
    let end = embs.last().unwrap();
    let points = grid
        .iter()
        .zip(&embs)
        .map(|(&w, e)| Ok((w, cosine_similarity(e, end)?.to_f64().unwrap())))
        .collect::<Result<_>>()?;
    Ok(SimilarityCurve {
        utterance_1: u1,
        utterance_2: u2,
        content_id,
        points,
        embeddings: embs
            .iter()
            .map(|e| e.iter().map(|v| v.to_f64().unwrap()).collect())
            .collect(),
    })
}

/// `count` utterance pairs from distinct training speakers, with a content
/// id for decoding each pair.
pub fn interpolation_pairs<R: Rng + ?Sized>(
    corpus: &Corpus,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize, usize)>> {
    let speakers = corpus.train_speakers();
    if speakers.len() < 2 {
        return Err(Error::domain("interpolation pairs need two training speakers"));
    }
    let by = corpus.utterances_by_speaker(&speakers);
    let n_contents = corpus.config.n_contents;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(0..speakers.len());
        let mut b = rng.random_range(0..speakers.len() - 1);
        if b >= a {
            b += 1;
        }
        let ua = &by[&speakers[a]];
        let ub = &by[&speakers[b]];
        out.push((
            ua[rng.random_range(0..ua.len())],
            ub[rng.random_range(0..ub.len())],
            rng.random_range(0..n_contents),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Intelligibility proxy

/// Linear content classifier on flattened frames, trained on natural
/// utterances only, read through an isotropic Gaussian channel.
#[derive(Debug, Clone)]
pub struct ContentProbe {
    classifier: LinearClassifier,
    /// `L` with `L Lᵀ = W Wᵀ`: unit input noise moves the class scores by
    /// `L η`.
    score_noise: DMatrix<f64>,
    pub n_contents: usize,
    pub noise_std: f64,
    pub noise_draws: usize,
    pub held_out_accuracy: f64,
}

fn flatten<T: Scalar>(m: &Matrix<T>) -> Vec<f64> {
    m.as_slice().iter().map(|v| v.to_f64().unwrap()).collect()
}

impl ContentProbe {
    /// Fits on the training speakers' natural utterances and measures
    /// accuracy on the held-out speakers' utterances under channel noise.
    ///
    /// Least squares with ridge `n·σ²` is the expected least-squares fit
    /// over noisy copies of the data, so no explicit augmentation is needed.
    pub fn train(corpus: &Corpus, cfg: &ProbeConfig) -> Result<Self> {
        let train = corpus.train_utterances();
        let held = corpus.held_out_utterances();
        if held.is_empty() {
            return Err(Error::Config("the content probe needs held-out speakers".into()));
        }
        let x: Vec<Vec<f64>> = train.iter().map(|&u| flatten(&corpus.utterances[u].frames)).collect();
        let y: Vec<usize> = train
            .iter()
            .map(|&u| corpus.utterances[u].content_id as usize)
            .collect();
        let ridge = (train.len() as f64 * cfg.noise_std * cfg.noise_std).max(1e-6);
        let n_contents = corpus.config.n_contents;
        let classifier = LinearClassifier::fit(&x, &y, n_contents, ridge)?;
        let score_noise = classifier.map().output_noise_factor();
        let mut probe = Self {
            classifier,
            score_noise,
            n_contents,
            noise_std: cfg.noise_std,
            noise_draws: cfg.noise_draws,
            held_out_accuracy: 0.0,
        };
        let mut rng = rng_from(cfg.seed, &[tags::PROBE]);
        let items: Vec<(Matrix<f64>, usize)> = held
            .iter()
            .map(|&u| {
                (
                    corpus.utterances[u].frames.clone(),
                    corpus.utterances[u].content_id as usize,
                )
            })
            .collect();
        probe.held_out_accuracy = 1.0 - probe.error_rate(&items, &mut rng);
        if probe.held_out_accuracy <= cfg.min_accuracy {
            return Err(Error::Contract(format!(
                "content probe held-out accuracy {:.4} is not above {}",
                probe.held_out_accuracy, cfg.min_accuracy
            )));
        }
        Ok(probe)
    }

    /// Noise-free class decision.
    pub fn classify(&self, flat: &[f64]) -> usize {
        self.classifier.predict(flat)
    }

    /// Error rate over `noise_draws` noisy copies of each labelled matrix.
    ///
    /// The classifier is linear, so adding `N(0, σ² I)` to the frames is the
    /// same as adding `σ L η`, `η ~ N(0, I)`, to the class scores. Drawing in
    /// score space gives the identical distribution at a fraction of the
    /// cost.
    pub fn error_rate<T: Scalar, R: Rng + ?Sized>(&self, items: &[(Matrix<T>, usize)], rng: &mut R) -> f64 {
        let k = self.n_contents;
        let mut wrong = 0usize;
        let mut eta = DVector::<f64>::zeros(k);
        for (m, label) in items {
            let clean = DVector::from_vec(self.classifier.scores(&flatten(m)));
            for _ in 0..self.noise_draws {
                eta.iter_mut().for_each(|e| *e = StandardNormal.sample(rng));
                let noisy = &clean + (&self.score_noise * &eta) * self.noise_std;
                if argmax(noisy.as_slice()) != *label {
                    wrong += 1;
                }
            }
        }
        wrong as f64 / (items.len() * self.noise_draws).max(1) as f64
    }
}

/// For each count `k`, decode every content id with each of `k` new
/// profiles and report the probe's error rate.
pub fn eval_intelligibility_proxy<T: Scalar, R: Rng + ?Sized>(
    system: &TrainedSystem<'_, T>,
    probe: &ContentProbe,
    counts: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&k| {
            let profiles = system.sample_profiles(k, rng);
            let mut items = Vec::with_capacity(k * probe.n_contents);
            for z in &profiles {
                for c in 0..probe.n_contents {
                    items.push((system.synthesize(z, c)?, c));
                }
            }
            Ok(probe.error_rate(&items, rng))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Normalization

/// Divides every row by the baseline row, cell by cell.
pub fn normalize_rows(
    raw: &BTreeMap<SystemVariant, Vec<f64>>,
    baseline: SystemVariant,
) -> Result<BTreeMap<SystemVariant, Vec<f64>>> {
    let base = raw
        .get(&baseline)
        .ok_or_else(|| Error::Normalization(format!("baseline system {baseline} missing")))?;
    if let Some(i) = base.iter().position(|&b| !(b > 0.0)) {
        return Err(Error::Normalization(format!(
            "baseline {baseline} cell {i} is {}; reporting raw values instead",
            base[i]
        )));
    }
    raw.iter()
        .map(|(&v, row)| {
            if row.len() != base.len() {
                return Err(Error::Normalization(format!("row for {v} has the wrong length")));
            }
            Ok((v, row.iter().zip(base).map(|(r, b)| r / b).collect()))
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Disentanglement

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    /// Held-out R² of a linear map from z to the true voice parameters.
    pub speaker_r2: f64,
    /// Held-out accuracy of a linear classifier from z to content id.
    pub content_accuracy: f64,
    /// True when z has (numerically) no variance.
    pub collapsed: bool,
}

/// Probe scores from precomputed latents. Fit on `train`, score on `test`;
/// each item is `(z, voice_params, content_id)`.
pub fn disentanglement_from_latents(
    train: &[(Vec<f64>, Vec<f64>, usize)],
    test: &[(Vec<f64>, Vec<f64>, usize)],
    n_contents: usize,
) -> Result<Disentanglement> {
    let var: f64 = {
        let d = train.first().map_or(0, |t| t.0.len());
        let n = train.len() as f64;
        (0..d)
            .map(|j| {
                let m = train.iter().map(|t| t.0[j]).sum::<f64>() / n;
                train.iter().map(|t| (t.0[j] - m).powi(2)).sum::<f64>() / n
            })
            .sum()
    };
    if !(var > 1e-12) {
        return Ok(Disentanglement {
            speaker_r2: 0.0,
            content_accuracy: 1.0 / n_contents as f64,
            collapsed: true,
        });
    }
    let xs: Vec<Vec<f64>> = train.iter().map(|t| t.0.clone()).collect();
    let vs: Vec<Vec<f64>> = train.iter().map(|t| t.1.clone()).collect();
    let cs: Vec<usize> = train.iter().map(|t| t.2).collect();
    let reg = LinearMap::fit(&xs, &vs, 1e-6)?;
    let pred: Vec<Vec<f64>> = test.iter().map(|t| reg.predict(&t.0)).collect();
    let truth: Vec<Vec<f64>> = test.iter().map(|t| t.1.clone()).collect();
    let clf = LinearClassifier::fit(&xs, &cs, n_contents, 1e-6)?;
    let hits = test.iter().filter(|t| clf.predict(&t.0) == t.2).count();
    Ok(Disentanglement {
        speaker_r2: r_squared(&pred, &truth),
        content_accuracy: hits as f64 / test.len().max(1) as f64,
        collapsed: false,
    })
}

/// Encodes every utterance; fits the probes on training speakers and scores
/// them on held-out speakers. Not defined for the lookup baseline, whose
/// profiles do not depend on the utterance.
pub fn disentanglement_probe<T: Scalar>(
    system: &TrainedSystem<'_, T>,
    corpus: &Corpus,
    frames: &[Matrix<T>],
) -> Result<Disentanglement> {
    if system.variant.is_baseline() {
        return Err(Error::Contract("the lookup baseline has no encoder to probe".into()));
    }
    let item = |u: usize| -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let utt = &corpus.utterances[u];
        let z = system.params.encode_mean(&frames[u])?;
        let voice = corpus
            .voice_params(utt.speaker_id)
            .ok_or_else(|| Error::Lookup(format!("speaker {} missing", utt.speaker_id)))?;
        Ok((
            z.iter().map(|v| v.to_f64().unwrap()).collect(),
            voice.to_vec(),
            utt.content_id as usize,
        ))
    };
    let train = corpus
        .train_utterances()
        .into_iter()
        .map(item)
        .collect::<Result<Vec<_>>>()?;
    let test = corpus
        .held_out_utterances()
        .into_iter()
        .map(item)
        .collect::<Result<Vec<_>>>()?;
    disentanglement_from_latents(&train, &test, corpus.config.n_contents)
}
