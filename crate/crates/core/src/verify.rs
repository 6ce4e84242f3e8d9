//! Independent speaker-verification scorer used as the judge for every
//! distinctiveness and similarity number.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{
    dot, Activation, Adam, AdamConfig, DenseLayer, LayerCache, Matrix, Mlp, MlpCache, ParamBlock, Parameters, Scalar,
};
use crate::sampler::{mine_triplet, SpeakerIndex};
use crate::seeding::{derive_seed, rng_from, tags};
use crate::toycorpus::Corpus;
use crate::vae::{triplet_loss_grad, NamedArray, RngState, TripletConfig, CHECKPOINT_FORMAT_VERSION};

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", (a.len(), 1), (b.len(), 1)));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::domain("cosine similarity of a zero vector"));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub score: f64,
    pub same_speaker: bool,
}

/// Scored pairs with ground-truth labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    /// All unordered pairs `i < j` of `embeddings`, labelled by `speakers`.
    pub fn all_pairs<T: Scalar>(embeddings: &[Vec<T>], speakers: &[u32]) -> Result<Self> {
        if embeddings.len() != speakers.len() {
            return Err(Error::shape(
                "TrialSet::all_pairs",
                (embeddings.len(), 1),
                (speakers.len(), 1),
            ));
        }
        let mut trials = Vec::with_capacity(embeddings.len() * embeddings.len().saturating_sub(1) / 2);
        for i in 0..embeddings.len() {
            for j in i + 1..embeddings.len() {
                trials.push(Trial {
                    a: i,
                    b: j,
                    score: cosine_similarity(&embeddings[i], &embeddings[j])?.to_f64().unwrap(),
                    same_speaker: speakers[i] == speakers[j],
                });
            }
        }
        Ok(Self { trials })
    }

    pub fn genuine_scores(&self) -> Vec<f64> {
        self.trials.iter().filter(|t| t.same_speaker).map(|t| t.score).collect()
    }

    pub fn impostor_scores(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| !t.same_speaker)
            .map(|t| t.score)
            .collect()
    }
}

/// Fraction of different-speaker trials scoring at or above `threshold`.
pub fn far_at_threshold(trials: &TrialSet, threshold: f64) -> Result<f64> {
    let impostor = trials.impostor_scores();
    if impostor.is_empty() {
        return Err(Error::domain("FAR needs at least one different-speaker trial"));
    }
    let accepted = impostor.iter().filter(|&&s| s >= threshold).count();
    Ok(accepted as f64 / impostor.len() as f64)
}

/// Nearest-rank percentile: the smallest score with at least `p`% of the
/// list at or below it.
pub fn threshold_from_percentile(scores: &[f64], percentile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::domain("percentile of an empty score list"));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::domain(format!("percentile {percentile} outside (0, 100)")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (percentile / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Equal-error rate: `min_t max(FAR(t), FRR(t))` over all observed scores.
pub fn equal_error_rate(trials: &TrialSet) -> Result<f64> {
    let mut genuine = trials.genuine_scores();
    let mut impostor = trials.impostor_scores();
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::domain("EER needs both genuine and impostor trials"));
    }
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let mut best = 1.0f64;
    let mut candidates: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    candidates.push(f64::INFINITY);
    for t in candidates {
        // Accept when score ≥ t.
        let rejected = genuine.partition_point(|&s| s < t) as f64;
        let accepted = ni - impostor.partition_point(|&s| s < t) as f64;
        best = best.min((rejected / ng).max(accepted / ni));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Verifier network

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub held_out_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub margin: f64,
    pub adam: AdamConfig,
    /// Training fails when held-out EER is not below this.
    pub max_eer: f64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            hidden: vec![64],
            embed_dim: 16,
            held_out_fraction: 0.25,
            steps: 600,
            batch_size: 16,
            margin: 0.5,
            adam: AdamConfig::default(),
            max_eer: 0.10,
        }
    }
}

/// Frame MLP, mean pooling, linear projection, unit normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierParams<T: Scalar = f64> {
    pub frame: Mlp<T>,
    pub proj: DenseLayer<T>,
}

impl<T: Scalar> Parameters<T> for VerifierParams<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
        self.frame.visit_prefixed("verifier.frame", f);
        f(ParamBlock {
            name: "verifier.proj.weight".into(),
            shape: self.proj.weights.shape(),
            data: self.proj.weights.as_slice(),
        });
        f(ParamBlock {
            name: "verifier.proj.bias".into(),
            shape: (self.proj.bias.len(), 1),
            data: &self.proj.bias,
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.frame.visit_prefixed_mut("verifier.frame", f);
        f("verifier.proj.weight", self.proj.weights.as_mut_slice());
        f("verifier.proj.bias", &mut self.proj.bias);
    }
}

pub struct VerifierCache<T: Scalar> {
    frames: Vec<MlpCache<T>>,
    proj: LayerCache<T>,
    raw: Vec<T>,
    norm: T,
}

impl<T: Scalar> VerifierParams<T> {
    pub fn init(feature_dim: usize, cfg: &VerifierConfig) -> Result<Self> {
        let mut rng = rng_from(cfg.seed, &[tags::VERIFIER, 0]);
        let mut sizes = vec![feature_dim];
        sizes.extend(&cfg.hidden);
        let frame = Mlp::glorot(&sizes, Activation::Tanh, Activation::Tanh, &mut rng)?;
        let proj = DenseLayer::glorot(frame.output_dim(), cfg.embed_dim, Activation::Identity, &mut rng);
        Ok(Self { frame, proj })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn embed_with_cache(&self, frames: &Matrix<T>) -> Result<(Vec<T>, VerifierCache<T>)> {
        if frames.rows() == 0 || frames.cols() != self.frame.input_dim() {
            return Err(Error::shape(
                "verifier embed",
                frames.shape(),
                (frames.rows().max(1), self.frame.input_dim()),
            ));
        }
        let mut pooled = vec![T::zero(); self.frame.output_dim()];
        let mut caches = Vec::with_capacity(frames.rows());
        for row in frames.row_iter() {
            let (h, c) = self.frame.forward(row)?;
            for (p, v) in pooled.iter_mut().zip(h) {
                *p += v;
            }
            caches.push(c);
        }
        let n = T::from_usize(frames.rows()).unwrap();
        pooled.iter_mut().for_each(|p| *p /= n);
        let (raw, proj) = self.proj.forward(&pooled)?;
        let norm = dot(&raw, &raw).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::NonFinite {
                term: "verifier embedding norm".into(),
            });
        }
        let e = raw.iter().map(|&v| v / norm).collect();
        Ok((
            e,
            VerifierCache {
                frames: caches,
                proj,
                raw,
                norm,
            },
        ))
    }

    /// Unit-norm embedding of a `T × F` frame matrix.
    pub fn embed(&self, frames: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.embed_with_cache(frames)?.0)
    }

    fn backward(&self, cache: &VerifierCache<T>, d_e: &[T], grads: &mut Self) -> Result<()> {
        // e = y/‖y‖  ⇒  ∂L/∂y = (g − e·(e·g)) / ‖y‖
        let e: Vec<T> = cache.raw.iter().map(|&v| v / cache.norm).collect();
        let eg = dot(&e, d_e);
        let d_raw: Vec<T> = d_e.iter().zip(&e).map(|(&g, &ei)| (g - ei * eg) / cache.norm).collect();
        let mut d_pooled =
            self.proj
                .backward_into(&cache.proj, &d_raw, &mut grads.proj.weights, &mut grads.proj.bias)?;
        let n = T::from_usize(cache.frames.len()).unwrap();
        d_pooled.iter_mut().for_each(|g| *g /= n);
        for c in &cache.frames {
            self.frame.backward_into(c, &d_pooled, &mut grads.frame)?;
        }
        Ok(())
    }

    /// Mean triplet loss over `(anchor, positive, negative)` frame triples
    /// and its gradient.
    pub fn triplet_loss_and_grads(
        &self,
        batch: &[(&Matrix<T>, &Matrix<T>, &Matrix<T>)],
        margin: f64,
    ) -> Result<(f64, Self)> {
        let cfg = TripletConfig::new(margin)?;
        let mut grads = self.zeros_like();
        let inv_b = T::one() / T::from_usize(batch.len().max(1)).unwrap();
        let mut total = 0.0;
        for (a, p, n) in batch {
            let (ea, ca) = self.embed_with_cache(a)?;
            let (ep, cp) = self.embed_with_cache(p)?;
            let (en, cn) = self.embed_with_cache(n)?;
            let (l, ga, gp, gn) = triplet_loss_grad(&ea, &ep, &en, cfg)?;
            total += l.to_f64().unwrap();
            if l > T::zero() {
                let s = |g: Vec<T>| g.into_iter().map(|v| v * inv_b).collect::<Vec<T>>();
                self.backward(&ca, &s(ga), &mut grads)?;
                self.backward(&cp, &s(gp), &mut grads)?;
                self.backward(&cn, &s(gn), &mut grads)?;
            }
        }
        let mean = total / batch.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                term: "verifier triplet".into(),
            });
        }
        Ok((mean, grads))
    }
}

/// Trained verifier plus the speakers it never saw.
#[derive(Debug, Clone)]
pub struct Verifier<T: Scalar = f64> {
    pub config: VerifierConfig,
    pub params: VerifierParams<T>,
    pub held_out_speakers: Vec<u32>,
    pub held_out_eer: f64,
    pub train_eer: f64,
}

/// Speakers the verifier holds out: drawn from the corpus's training
/// speakers (all speakers when unsplit), so they never overlap the
/// generative model's held-out set.
pub fn verifier_held_out(corpus: &Corpus, cfg: &VerifierConfig) -> Result<Vec<u32>> {
    if !(cfg.held_out_fraction > 0.0 && cfg.held_out_fraction < 0.5) {
        return Err(Error::Config(format!(
            "verifier held_out_fraction must lie in (0, 0.5), got {}",
            cfg.held_out_fraction
        )));
    }
    let mut pool = corpus.train_speakers();
    let k = (cfg.held_out_fraction * pool.len() as f64).round() as usize;
    if k < 2 || pool.len() - k < 2 {
        return Err(Error::Config("too few speakers for a verifier split".into()));
    }
    pool.shuffle(&mut rng_from(cfg.seed, &[tags::VERIFIER, 1]));
    let mut held: Vec<u32> = pool[..k].to_vec();
    held.sort_unstable();
    Ok(held)
}

/// Embeds every utterance of `speakers` and scores all pairs.
pub fn natural_trials<T: Scalar>(
    params: &VerifierParams<T>,
    corpus: &Corpus,
    frames: &[Matrix<T>],
    speakers: &[u32],
) -> Result<TrialSet> {
    let by = corpus.utterances_by_speaker(speakers);
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for (&s, utts) in &by {
        for &u in utts {
            embs.push(params.embed(&frames[u])?);
            labels.push(s);
        }
    }
    TrialSet::all_pairs(&embs, &labels)
}

pub fn train_verifier<T: Scalar>(corpus: &Corpus, cfg: &VerifierConfig) -> Result<Verifier<T>> {
    if corpus.speakers.len() < 8 {
        return Err(Error::Config(
            "the verifier needs a corpus with at least 8 speakers".into(),
        ));
    }
    let held = verifier_held_out(corpus, cfg)?;
    let train: Vec<u32> = corpus
        .speakers
        .iter()
        .map(|s| s.speaker_id)
        .filter(|s| held.binary_search(s).is_err())
        .collect();
    let frames: Vec<Matrix<T>> = corpus.utterances.iter().map(|u| u.frames.cast()).collect();
    let index = SpeakerIndex::over(corpus, &train);
    let pool = index.utterances();

    let (_, f) = corpus.frames_shape();
    let mut params = VerifierParams::<T>::init(f, cfg)?;
    let mut opt = Adam::new(cfg.adam, params.num_params());
    let mut rng = rng_from(derive_seed(cfg.seed, &[tags::VERIFIER, 2]), &[]);
    for _ in 0..cfg.steps {
        let mut triples = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let anchor = pool[rand::Rng::random_range(&mut rng, 0..pool.len())];
            let t = mine_triplet(&index, anchor, &mut rng)?;
            triples.push((&frames[t.anchor], &frames[t.positive], &frames[t.negative]));
        }
        let (_, grads) = params.triplet_loss_and_grads(&triples, cfg.margin)?;
        opt.update(&mut params, &grads, |_| true)?;
    }

    let held_out_eer = equal_error_rate(&natural_trials(&params, corpus, &frames, &held)?)?;
    // Train-speaker EER on a same-sized subset keeps the pair count bounded.
    let train_subset: Vec<u32> = train.iter().copied().take(held.len().max(2)).collect();
    let train_eer = equal_error_rate(&natural_trials(&params, corpus, &frames, &train_subset)?)?;
    if held_out_eer >= cfg.max_eer {
        return Err(Error::Training(format!(
            "verifier held-out EER {held_out_eer:.4} is not below {}; use a larger corpus or more steps",
            cfg.max_eer
        )));
    }
    Ok(Verifier {
        config: cfg.clone(),
        params,
        held_out_speakers: held,
        held_out_eer,
        train_eer,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint (same document layout as the generative model's)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierCheckpoint {
    pub format_version: u32,
    pub config: VerifierConfig,
    pub feature_dim: usize,
    pub rng_state: Option<RngState>,
    pub params: Vec<NamedArray>,
    pub held_out_speakers: Vec<u32>,
    pub held_out_eer: f64,
    pub train_eer: f64,
}

impl VerifierCheckpoint {
    pub fn capture<T: Scalar>(v: &Verifier<T>) -> Self {
        let mut params = Vec::new();
        v.params.visit(&mut |b| {
            params.push(NamedArray {
                name: b.name,
                shape: b.shape,
                data: b.data.iter().map(|x| x.to_f64().unwrap()).collect(),
            })
        });
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: v.config.clone(),
            feature_dim: v.params.frame.input_dim(),
            rng_state: None,
            params,
            held_out_speakers: v.held_out_speakers.clone(),
            held_out_eer: v.held_out_eer,
            train_eer: v.train_eer,
        }
    }

    pub fn restore<T: Scalar>(&self) -> Result<Verifier<T>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported verifier format_version {}",
                self.format_version
            )));
        }
        let mut params = VerifierParams::<T>::init(self.feature_dim, &self.config)?;
        let layout = params.layout();
        if layout.len() != self.params.len() {
            return Err(Error::Format("verifier parameter block count mismatch".into()));
        }
        let mut flat = Vec::new();
        for ((name, shape), b) in layout.iter().zip(&self.params) {
            if *name != b.name || *shape != b.shape || b.data.len() != shape.0 * shape.1 {
                return Err(Error::Format(format!(
                    "verifier block `{}` does not match `{name}`",
                    b.name
                )));
            }
            flat.extend(b.data.iter().map(|&x| T::from(x).unwrap()));
        }
        params.set_flat(&flat)?;
        Ok(Verifier {
            config: self.config.clone(),
            params,
            held_out_speakers: self.held_out_speakers.clone(),
            held_out_eer: self.held_out_eer,
            train_eer: self.train_eer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
